"""Target/source view selection driven by flare occupancy.

Targets whose flare occupancy exceeds a threshold are never trained on. Sources
come from a pool of the ``ceil(k * N)`` nearest cameras, from which the ``N``
least flare-affected views are kept.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NoMask, NoTrainableTargets, TooFewViews
from .flare_synth import derive_rng

log = logging.getLogger(__name__)

OCCUPANCY_THRESHOLD = 0.10
DESK_K_RANGE = (1.0, 2.0)
DESK_N_RANGE = (3, 6)
FULL_SCALE_K_RANGE = (1.0, 3.0)
FULL_SCALE_N_RANGE = (8, 12)


@dataclass
class ViewSelection:
    target_index: int
    source_indices: list
    pool_size: int
    k: float
    N: int
    scene: str = ""
    scene_index: int = 0

    def to_json(self) -> dict:
        return {"scene": self.scene, "target": self.target_index, "sources": list(self.source_indices),
                "k": self.k, "N": self.N, "pool_size": self.pool_size}

    @classmethod
    def from_json(cls, d: dict) -> "ViewSelection":
        return cls(int(d["target"]), [int(i) for i in d["sources"]],
                   int(d.get("pool_size", math.ceil(d["k"] * d["N"]))), float(d["k"]), int(d["N"]),
                   d.get("scene", ""))


def _occupancies(scene) -> np.ndarray:
    occ = scene.occupancies()
    missing = [i for i, o in enumerate(occ) if o is None]
    if missing:
        raise NoMask(f"scene {scene.scene_id!r}: views {missing} have no occupancy mask")
    return np.asarray(occ, dtype=np.float64)


def eligible_targets(scene, threshold: float = OCCUPANCY_THRESHOLD) -> list:
    occ = _occupancies(scene)
    return [i for i, o in enumerate(occ) if o <= threshold]


def rank_sources(distances, occupancies, indices, n: int) -> list:
    """Lowest occupancy first, then smaller distance, then smaller index."""
    order = sorted(indices, key=lambda i: (occupancies[i], distances[i], i))
    return order[:n]


def select_sources(scene, target: int, N: int, k: float, seed=None,
                   centers: Optional[np.ndarray] = None) -> ViewSelection:
    """Occupancy-aware source selection from the nearest-camera pool.

    ``seed`` is accepted for interface symmetry; the rule itself is deterministic.
    """
    occ = _occupancies(scene)
    if centers is None:
        centers = scene.centers()
    pool_size = math.ceil(k * N)
    others = [i for i in range(len(occ)) if i != target]
    if len(others) < pool_size or N < 1:
        raise TooFewViews(f"scene {scene.scene_id!r}: pool of {pool_size} needs more than "
                          f"{len(others)} other views")
    dist = np.linalg.norm(centers - centers[target], axis=1)
    pool = sorted(others, key=lambda i: (dist[i], i))[:pool_size]
    sources = rank_sources(dist, occ, pool, N)
    return ViewSelection(target, sources, pool_size, float(k), int(N), scene.scene_id)


def select_sources_for_pose(scene, target_center, N: int, k: float, use_masks: bool = True,
                            exclude: Sequence[int] = ()) -> ViewSelection:
    """Source selection for a novel pose that is not itself a view of ``scene``."""
    n_avail = len(scene) - len(set(exclude))
    N = min(N, n_avail)
    pool_size = min(math.ceil(k * N), n_avail)
    centers = scene.centers()
    if use_masks:
        occ = _occupancies(scene)
    else:
        occ = np.zeros(len(scene))
    dist = np.linalg.norm(centers - np.asarray(target_center, dtype=np.float64), axis=1)
    cand = [i for i in range(len(scene)) if i not in set(exclude)]
    pool = sorted(cand, key=lambda i: (dist[i], i))[:pool_size]
    sources = rank_sources(dist, occ, pool, N)
    return ViewSelection(-1, sources, pool_size, float(k), int(N), scene.scene_id)


def draw_k_n(rng: np.random.Generator, k_range, n_range):
    k = float(rng.uniform(*k_range))
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    return k, n


def build_dictionary(scenes: Sequence, seed: int, k_range=DESK_K_RANGE, n_range=DESK_N_RANGE,
                     threshold: float = OCCUPANCY_THRESHOLD) -> list:
    """One selection per eligible target per scene, each with its own (k, N).

    When a scene is too small for the drawn pool, N and then the pool are
    clamped to the views available. Scenes without eligible targets are skipped
    with a warning; if none remain, NoTrainableTargets is raised.
    """
    entries = []
    for si, scene in enumerate(scenes):
        targets = eligible_targets(scene, threshold)
        if not targets:
            log.warning("scene %r has no view with occupancy <= %.2f; skipped", scene.scene_id, threshold)
            continue
        centers = scene.centers()
        n_other = len(scene) - 1
        for t in targets:
            rng = derive_rng(seed, si, t)
            k, n = draw_k_n(rng, k_range, n_range)
            n = min(n, n_other)
            k = min(k, n_other / n)
            # float round-off in k * N must not push the pool past the available views
            if math.ceil(k * n) > n_other:
                k = n_other / n - 1e-9
            sel = select_sources(scene, t, n, k, centers=centers)
            sel.scene_index = si
            entries.append(sel)
    if not entries:
        raise NoTrainableTargets(f"no view in {len(scenes)} scene(s) has occupancy <= {threshold}")
    return entries


def save_dictionary(entries, path) -> str:
    with open(path, "w") as f:
        json.dump([e.to_json() for e in entries], f, indent=1)
    return str(path)


def load_dictionary(path) -> list:
    with open(path) as f:
        return [ViewSelection.from_json(d) for d in json.load(f)]
