"""Held-out view rendering, metric reports and masked-vs-vanilla comparison."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import geometry, metrics
from .errors import BadSpec, EmptyRegion, MisalignedScenes
from .renderer import SourceViews
from .sampling import select_sources_for_pose
from .scene_io import save_rendered

FULL_SCALE_REFERENCE = {"psnr": 26.18, "ssim": 0.8815, "note": "full-scale reference, not reproduced here"}


@dataclass
class EvalReport:
    psnr: Optional[float]
    ssim: Optional[float]
    psnr_flare_region: Optional[float]
    n_views: int
    manifest: dict
    per_view: list = field(default_factory=list)
    reference_paper: dict = field(default_factory=lambda: dict(FULL_SCALE_REFERENCE))

    def to_json(self) -> dict:
        return asdict(self)


def resolve_masks(scene, mask_mode: str):
    """Returns ``scene`` with the masks a render should use."""
    if mask_mode == "none":
        return scene.with_zero_masks()
    if mask_mode == "annotated":
        return scene if scene.has_masks else scene.with_zero_masks()
    if mask_mode.startswith("fmg:"):
        from .fmg import infer_scene_masks, load_fmg
        return infer_scene_masks(load_fmg(mask_mode[4:]), scene)
    raise BadSpec(f"unknown mask mode {mask_mode!r}")


@torch.no_grad()
def render_view(ckpt, scene, K, c2w, hw, exclude: Sequence[int] = (), use_masks: bool = True,
                n_sources: Optional[int] = None, k: Optional[float] = None, chunk: int = 1024):
    """Renders a full image for pose (K, c2w) from views of ``scene`` not in ``exclude``.

    Returns (image H x W x 3 numpy, ViewSelection).
    """
    model = ckpt.model
    model.eval()
    tc = ckpt.train_config
    c2w = np.asarray(c2w, dtype=np.float64).reshape(3, 4)
    sel = select_sources_for_pose(scene, c2w[:, 3], n_sources or tc.eval_n_sources, k or tc.eval_k,
                                  use_masks=use_masks, exclude=exclude)
    assert not set(sel.source_indices) & set(exclude), "held-out view used as a source"
    dtype = next(model.parameters()).dtype
    src = SourceViews.from_views([scene[i] for i in sel.source_indices], sel.source_indices,
                                 dtype=dtype, use_masks=use_masks)
    h, w = hw
    vs, us = np.mgrid[0:h, 0:w]
    pixels = np.stack([us.ravel(), vs.ravel()], 1)
    o, d = geometry.rays_for_camera(K, c2w, hw, pixels, dtype=dtype)
    near, far = scene[0].near, scene[0].far
    depths = geometry.sample_depths(near, far, model.cfg.M_samples, n_rays=len(o), dtype=dtype)
    grids = model.encode_views(src.images)
    out = [model(o[s:s + chunk], d[s:s + chunk], depths[s:s + chunk], near, far, src, grids)
           for s in range(0, len(o), chunk)]
    return torch.cat(out).reshape(h, w, 3).double().numpy(), sel


def _check_aligned(scene, clean):
    if len(scene) != len(clean) or scene.hw != clean.hw:
        raise MisalignedScenes(f"scene has {len(scene)} views of {scene.hw}, clean has "
                               f"{len(clean)} of {clean.hw}")
    for i, (a, b) in enumerate(zip(scene.views, clean.views)):
        if not (np.allclose(a.pose_c2w, b.pose_c2w, atol=1e-6)
                and np.allclose(a.intrinsics, b.intrinsics, atol=1e-6)):
            raise MisalignedScenes(f"view {i}: camera differs between scene and clean scene")


def evaluate(ckpt, scene, clean_scene=None, heldout: Sequence[int] = (), out_dir=None,
             mask_mode: Optional[str] = None) -> EvalReport:
    """Renders each held-out view from the remaining views and scores it against clean ground truth.

    Full-frame PSNR/SSIM are averaged over views; the flare-region PSNR pools
    every pixel flagged in the held-out views' flare masks.
    """
    heldout = [int(i) for i in heldout]
    if not heldout:
        raise BadSpec("evaluation needs at least one held-out view index")
    if any(not 0 <= i < len(scene) for i in heldout):
        raise BadSpec(f"held-out indices {heldout} out of range for {len(scene)} views")
    if clean_scene is not None:
        _check_aligned(scene, clean_scene)
    if mask_mode is None:
        mask_mode = "annotated" if ckpt.train_config.uses_masks else "none"
    gt_masks = {i: scene[i].mask for i in heldout}
    render_scene = resolve_masks(scene, mask_mode)

    per_view = []
    sq_flare, n_flare = 0.0, 0
    psnrs, ssims = [], []
    for i in heldout:
        v = scene[i]
        image, sel = render_view(ckpt, render_scene, v.intrinsics, v.pose_c2w, v.hw, exclude=heldout,
                                 use_masks=mask_mode != "none")
        entry = {"view": i, "sources": list(sel.source_indices)}
        if out_dir:
            entry["render"] = save_rendered(f"render_{i:03d}", image, out_dir)
        if clean_scene is not None:
            gt = clean_scene[i].image
            entry["psnr"] = metrics.psnr(image, gt)
            entry["ssim"] = metrics.ssim(image, gt)
            psnrs.append(entry["psnr"])
            ssims.append(entry["ssim"])
            m = gt_masks[i]
            if m is not None and m.bits.any():
                region = m.bits.astype(bool)
                sq_flare += float(((image - gt)[region] ** 2).sum())
                n_flare += int(region.sum()) * 3
                entry["psnr_flare_region"] = metrics.psnr(image, gt, region)
        per_view.append(entry)

    manifest = {
        "scene": scene.scene_id,
        "heldout": heldout,
        "mask_mode": mask_mode,
        "renderer_config": ckpt.renderer_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "seed": ckpt.train_config.seed,
        "step": ckpt.step,
    }
    report = EvalReport(
        psnr=float(np.mean(psnrs)) if psnrs else None,
        ssim=float(np.mean(ssims)) if ssims else None,
        psnr_flare_region=metrics.psnr_from_mse(sq_flare / n_flare) if n_flare else None,
        n_views=len(heldout),
        manifest=manifest,
        per_view=per_view,
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as f:
            json.dump(report.to_json(), f, indent=1)
    return report


def _heatmap(diff: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    mag = np.abs(diff).mean(-1)
    scale = mag.max() if mag.max() > 0 else 1.0
    return colormaps["inferno"](mag / scale)[..., :3]


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"


def ablation_compare(ckpt_a, ckpt_b, scene, clean_scene, heldout, out_dir=None,
                     labels=("masked", "vanilla")) -> dict:
    """Side-by-side reports for two checkpoints, deltas (a - b) and a markdown table."""
    sub_a = os.path.join(out_dir, labels[0]) if out_dir else None
    sub_b = os.path.join(out_dir, labels[1]) if out_dir else None
    rep_a = evaluate(ckpt_a, scene, clean_scene, heldout, sub_a)
    rep_b = evaluate(ckpt_b, scene, clean_scene, heldout, sub_b)
    deltas = {}
    for key in ("psnr", "ssim", "psnr_flare_region"):
        a, b = getattr(rep_a, key), getattr(rep_b, key)
        deltas[key] = None if a is None or b is None else a - b
    rows = [f"| metric | {labels[0]} | {labels[1]} | delta |", "|---|---|---|---|"]
    for key in ("psnr", "ssim", "psnr_flare_region"):
        rows.append(f"| {key} | {_fmt(getattr(rep_a, key))} | {_fmt(getattr(rep_b, key))} | "
                    f"{_fmt(deltas[key])} |")
    table = "\n".join(rows) + "\n"
    result = {"a": rep_a.to_json(), "b": rep_b.to_json(), "deltas": deltas, "table": table,
              "labels": list(labels)}
    if out_dir:
        from .scene_io import read_image
        for ea, eb in zip(rep_a.per_view, rep_b.per_view):
            diff = read_image(ea["render"]) - read_image(eb["render"])
            heat = np.round(_heatmap(diff) * 255).astype(np.uint8)
            Image.fromarray(heat).save(os.path.join(out_dir, f"diff_{ea['view']:03d}.png"))
        with open(os.path.join(out_dir, "comparison.md"), "w") as f:
            f.write(table)
        with open(os.path.join(out_dir, "comparison.json"), "w") as f:
            json.dump(result, f, indent=1)
    return result
