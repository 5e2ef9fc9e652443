"""Renderer optimization with the flare-masked photometric loss."""

from __future__ import annotations

import copy
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import geometry
from .errors import BadCheckpoint, BadSpec, DivergedLoss, NoMask, ShapeMismatch
from .renderer import GNFRenderer, RendererConfig, SourceViews
from .sampling import DESK_K_RANGE, DESK_N_RANGE, OCCUPANCY_THRESHOLD, build_dictionary

log = logging.getLogger(__name__)

CKPT_FORMAT = "gnfr-renderer"
CKPT_VERSION = 1
MASK_MODES = ("annotated", "none")


@dataclass
class TrainConfig:
    rays_per_iter: int = 256
    iters: int = 2000
    lr: float = 1e-3
    lr_final: float = 1e-5
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    finetune_from: Optional[str] = None
    eval_every: int = 0
    mask_mode: str = "annotated"     # "none" strips every mask (vanilla training)
    view_sampler: bool = True
    point_sampler: bool = True
    masked_loss: bool = True
    sample_unmasked_only: bool = False
    occupancy_threshold: float = OCCUPANCY_THRESHOLD
    k_range: tuple = DESK_K_RANGE
    n_range: tuple = DESK_N_RANGE
    eval_n_sources: int = 4
    eval_k: float = 1.5

    def validate(self) -> "TrainConfig":
        if self.rays_per_iter < 1:
            raise BadSpec("rays_per_iter must be >= 1")
        if self.iters < 0:
            raise BadSpec("iters must be >= 0")
        if self.mask_mode not in MASK_MODES:
            raise BadSpec(f"mask_mode must be one of {MASK_MODES}")
        if not self.lr > 0:
            raise BadSpec("lr must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BadSpec(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("betas", "k_range", "n_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def uses_masks(self) -> bool:
        return self.mask_mode != "none"


@dataclass
class Checkpoint:
    model: GNFRenderer
    train_config: TrainConfig
    step: int = 0
    history: dict = field(default_factory=lambda: {"loss": [], "n_unmasked": []})
    metrics: dict = field(default_factory=dict)

    @property
    def renderer_config(self) -> RendererConfig:
        return self.model.cfg

    def manifest(self) -> dict:
        return {
            "format": CKPT_FORMAT,
            "version": CKPT_VERSION,
            "renderer_config": self.renderer_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "metrics": self.metrics,
        }

    def save(self, path) -> str:
        payload = self.manifest()
        payload["history"] = self.history
        payload["state_dict"] = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        buf = io.BytesIO()
        torch.save(payload, buf)
        with open(path, "wb") as f:
            f.write(buf.getvalue())
        return str(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise BadCheckpoint(f"{path}: unreadable checkpoint ({e})") from None
    if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
        raise BadCheckpoint(f"{path}: not a renderer checkpoint")
    if payload.get("version") != CKPT_VERSION:
        raise BadCheckpoint(f"{path}: unsupported checkpoint version {payload.get('version')}")
    model = GNFRenderer(RendererConfig.from_dict(payload["renderer_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(model, TrainConfig.from_dict(payload["train_config"]), payload["step"],
                      payload.get("history", {"loss": [], "n_unmasked": []}), payload.get("metrics", {}))


def masked_loss(pred, target, mask_bits, return_count: bool = False):
    """MSE over rays whose target pixel is flare-free (mask bit 0).

    The mean runs over unmasked rays only, so masked rays get exactly zero
    gradient. With every ray masked the loss is 0.
    """
    if pred.shape != target.shape or pred.shape[:1] != tuple(mask_bits.shape):
        raise ShapeMismatch(f"pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                            f"mask {tuple(mask_bits.shape)}")
    keep = mask_bits == 0
    n = int(keep.sum())
    if n == 0:
        loss = (pred * 0.0).sum()
    else:
        loss = ((pred[keep] - target[keep]) ** 2).mean()
    return (loss, n) if return_count else loss


def cosine_lr(step, total, lr, lr_final):
    if total <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1 + math.cos(math.pi * step / (total - 1)))


class _SceneTensors:
    """Per-scene tensors cached once so each iteration only indexes."""

    def __init__(self, scene, dtype, use_masks):
        h, w = scene.hw
        self.scene = scene
        self.images = torch.as_tensor(np.stack([v.image for v in scene.views]), dtype=dtype)
        self.K = torch.as_tensor(np.stack([v.intrinsics for v in scene.views]), dtype=dtype)
        self.c2w = torch.as_tensor(np.stack([v.pose_c2w for v in scene.views]), dtype=dtype)
        masks = [v.mask.bits if (use_masks and v.mask is not None) else np.zeros((h, w), np.uint8)
                 for v in scene.views]
        self.masks = torch.as_tensor(np.stack(masks)).to(torch.uint8)
        self.near = scene[0].near
        self.far = scene[0].far

    def sources(self, idx, point_sampler=True):
        idx_t = torch.as_tensor(list(idx))
        masks = self.masks[idx_t] if point_sampler else torch.zeros_like(self.masks[idx_t])
        return SourceViews(self.images[idx_t], self.K[idx_t], self.c2w[idx_t], masks, tuple(idx))


def prepare_scenes(scenes, tcfg: TrainConfig):
    if not tcfg.uses_masks:
        return [s.with_zero_masks() for s in scenes]
    for s in scenes:
        if not s.has_masks:
            raise NoMask(f"scene {s.scene_id!r} lacks masks; use mask_mode='none' or supply masks")
    return list(scenes)


def _make_model(rcfg: RendererConfig, seed: int) -> GNFRenderer:
    torch.manual_seed(seed)
    return GNFRenderer(rcfg)


def train(scenes: Sequence, rcfg: Optional[RendererConfig] = None, tcfg: Optional[TrainConfig] = None,
          out_path=None, init: Optional[Checkpoint] = None) -> Checkpoint:
    """Trains (or continues training) a renderer on ``scenes``.

    Each iteration draws one dictionary entry, ``rays_per_iter`` target pixels
    and takes one Adam step on the masked loss.
    """
    tcfg = (tcfg or TrainConfig()).validate()
    seed = int(os.environ.get("GNFR_SEED", tcfg.seed))
    torch.use_deterministic_algorithms(True)
    scenes = prepare_scenes(scenes, tcfg)
    dict_scenes = scenes if tcfg.view_sampler else [s.with_zero_masks() for s in scenes]
    entries = build_dictionary(dict_scenes, seed, tcfg.k_range, tcfg.n_range,
                               tcfg.occupancy_threshold if tcfg.view_sampler else 1.0)

    if init is None and tcfg.finetune_from:
        init = load_checkpoint(tcfg.finetune_from)
    if init is not None:
        model = copy.deepcopy(init.model)
        history = copy.deepcopy(init.history)
        step0 = init.step
    else:
        model = _make_model(rcfg or RendererConfig(), seed)
        history = {"loss": [], "n_unmasked": []}
        step0 = 0
    model.train()
    dtype = next(model.parameters()).dtype
    tensors = [_SceneTensors(s, dtype, tcfg.uses_masks) for s in scenes]
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=tuple(tcfg.betas))
    gen = torch.Generator().manual_seed(seed)
    ckpt = Checkpoint(model, tcfg, step0, history)

    for it in range(tcfg.iters):
        lr = cosine_lr(it, tcfg.iters, tcfg.lr, tcfg.lr_final)
        for g in opt.param_groups:
            g["lr"] = lr
        e = entries[int(torch.randint(len(entries), (1,), generator=gen))]
        st = tensors[e.scene_index]
        view = st.scene[e.target_index]
        h, w = view.hw
        target_mask = st.masks[e.target_index]
        if tcfg.sample_unmasked_only and tcfg.masked_loss:
            free = torch.nonzero(target_mask.reshape(-1) == 0).squeeze(1)
            flat = free[torch.randint(len(free), (tcfg.rays_per_iter,), generator=gen)]
        else:
            flat = torch.randint(h * w, (tcfg.rays_per_iter,), generator=gen)
        pixels = torch.stack([flat % w, flat // w], 1)
        rays = geometry.rays_for_pixels(view, pixels, dtype=dtype)
        depths = geometry.sample_depths(st.near, st.far, model.cfg.M_samples, "stratified", gen,
                                        n_rays=len(rays), dtype=dtype)
        src = st.sources(e.source_indices, tcfg.point_sampler)
        pred = model(rays.origins, rays.directions, depths, st.near, st.far, src)
        bits = target_mask[pixels[:, 1], pixels[:, 0]]
        if not tcfg.masked_loss:
            bits = torch.zeros_like(bits)
        loss, n = masked_loss(pred, rays.target_rgb.to(dtype), bits, return_count=True)
        if not torch.isfinite(loss):
            raise DivergedLoss(f"loss became {loss.item()} at iteration {step0 + it}")
        opt.zero_grad(set_to_none=True)
        if n > 0:
            loss.backward()
            opt.step()
        history["loss"].append(float(loss.detach()))
        history["n_unmasked"].append(n)
        ckpt.step = step0 + it + 1
        if tcfg.eval_every and (it + 1) % tcfg.eval_every == 0:
            window = history["loss"][-tcfg.eval_every:]
            ckpt.metrics = {"step": ckpt.step, "mean_loss": float(np.mean(window))}
            log.info("step %d  loss %.5f  lr %.2e", ckpt.step, ckpt.metrics["mean_loss"], lr)
            if out_path:
                ckpt.save(out_path)
    model.eval()
    if history["loss"]:
        window = history["loss"][-100:]
        ckpt.metrics = {"step": ckpt.step, "mean_loss": float(np.mean(window))}
    if out_path:
        ckpt.save(out_path)
    return ckpt


def finetune(base: Checkpoint, scene, tcfg: Optional[TrainConfig] = None, out_path=None) -> Checkpoint:
    """Continues training ``base`` on one scene; zero iterations returns ``base`` untouched."""
    tcfg = tcfg or copy.deepcopy(base.train_config)
    if tcfg.iters == 0:
        if out_path:
            base.save(out_path)
        return base
    return train([scene], tcfg=tcfg, out_path=out_path, init=base)
