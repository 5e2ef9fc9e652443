"""Flare-occupancy mask generator: a small residual encoder-decoder with
pyramid pooling, trained with class-weighted binary cross-entropy.
"""

from __future__ import annotations

import glob
import io
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadCheckpoint, BadSpec, DivergedLoss, EmptyCorpus, ShapeMismatch
from .scene_io import OccupancyMask, SceneDataset, read_image, read_mask

log = logging.getLogger(__name__)

FMG_FORMAT = "gnfr-fmg"
FMG_VERSION = 1
EPS = 1e-7


@dataclass
class SegModelConfig:
    base_channels: int = 16
    depth: int = 4
    pyramid_bins: tuple = (1, 2, 4)
    class_weights: tuple = (5.0, 1.0)   # (flare, non-flare)
    input_size: tuple = (128, 128)
    batch_size: int = 8
    lr: float = 1e-3

    def validate(self) -> "SegModelConfig":
        if any(w <= 0 for w in self.class_weights) or len(self.class_weights) != 2:
            raise BadSpec(f"class_weights must be two positive values, got {self.class_weights}")
        f = 2 ** self.depth
        if any(s % f for s in self.input_size):
            raise BadSpec(f"input_size {self.input_size} not divisible by 2^depth = {f}")
        if self.depth < 1 or self.base_channels < 1:
            raise BadSpec("depth and base_channels must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SegModelConfig":
        d = dict(d)
        for key in ("pyramid_bins", "class_weights", "input_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


@dataclass
class SegMetrics:
    miou: float
    macc: float
    per_class_iou: tuple        # (flare, non-flare)
    per_class_acc: tuple = ()   # (flare recall, non-flare recall)

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_bce(pred_prob, target, weights=(5.0, 1.0)):
    """-mean[w1 t log p + w0 (1 - t) log(1 - p)], p clamped to [1e-7, 1 - 1e-7]."""
    pred_prob = torch.as_tensor(pred_prob)
    target = torch.as_tensor(target, dtype=pred_prob.dtype)
    if pred_prob.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred_prob.shape)} vs target {tuple(target.shape)}")
    w1, w0 = weights
    p = pred_prob.clamp(EPS, 1 - EPS)
    return -(w1 * target * torch.log(p) + w0 * (1 - target) * torch.log(1 - p)).mean()


def confusion(pred, target) -> np.ndarray:
    """2x2 counts indexed [target class, predicted class], class 1 = flare."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return np.array([[np.sum(~target & ~pred), np.sum(~target & pred)],
                     [np.sum(target & ~pred), np.sum(target & pred)]], dtype=np.int64)


def metrics_from_confusion(cm: np.ndarray) -> SegMetrics:
    ious, accs = [], []
    for c in (1, 0):
        tp = cm[c, c]
        union = cm[c, :].sum() + cm[:, c].sum() - tp
        ious.append(1.0 if union == 0 else tp / union)
        if cm[c, :].sum() > 0:
            accs.append(tp / cm[c, :].sum())
        else:
            accs.append(float("nan"))
    present = [a for a in accs if not np.isnan(a)]
    macc = float(np.mean(present)) if present else 1.0
    return SegMetrics(float(np.mean(ious)), macc, (float(ious[0]), float(ious[1])),
                      tuple(float(a) for a in accs))


def seg_metrics(pred, target) -> SegMetrics:
    """Per-class IoU (empty union counts as 1.0) and mean per-class pixel accuracy."""
    return metrics_from_confusion(confusion(pred, target))


# -- network ---------------------------------------------------------------------

class _Res(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.b1 = nn.BatchNorm2d(cout)
        self.c2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.b2 = nn.BatchNorm2d(cout)
        self.skip = nn.Identity()
        if stride != 1 or cin != cout:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.b1(self.c1(x)))
        return F.relu(self.b2(self.c2(y)) + self.skip(x))


class PyramidPooling(nn.Module):
    def __init__(self, cin, bins):
        super().__init__()
        cb = max(cin // len(bins), 1)
        self.bins = tuple(bins)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cb, 1, bias=False), nn.BatchNorm2d(cb), nn.ReLU())
            for _ in bins)
        self.fuse = nn.Sequential(nn.Conv2d(cin + cb * len(bins), cin, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(cin), nn.ReLU())

    def forward(self, x):
        size = x.shape[-2:]
        outs = [x]
        for b, stage in zip(self.bins, self.stages):
            y = stage(F.adaptive_avg_pool2d(x, b))
            outs.append(F.interpolate(y, size=size, mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(outs, 1))


class FlareSegNet(nn.Module):
    """Stride-2 stem, ``depth`` residual levels (the last ``depth - 1`` downsampling),
    pyramid pooling at the bottleneck, skip-connected decoder, one flare logit per pixel."""

    def __init__(self, cfg: SegModelConfig):
        super().__init__()
        c = cfg.base_channels
        self.stem = nn.Sequential(nn.Conv2d(3, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU())
        chans = [c * 2 ** i for i in range(cfg.depth)]
        self.enc = nn.ModuleList(
            _Res(chans[i - 1] if i else c, chans[i], stride=1 if i == 0 else 2) for i in range(cfg.depth))
        self.ppm = PyramidPooling(chans[-1], cfg.pyramid_bins)
        self.dec = nn.ModuleList(_Res(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(cfg.depth - 1)))
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        """x: B x 3 x H x W in [0,1] -> B x H x W logits."""
        size = x.shape[-2:]
        y = self.stem(x * 2.0 - 1.0)
        skips = []
        for blk in self.enc:
            y = blk(y)
            skips.append(y)
        y = self.ppm(y)
        for blk, skip in zip(self.dec, reversed(skips[:-1])):
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = blk(torch.cat([y, skip], 1))
        y = F.interpolate(self.head(y), size=size, mode="bilinear", align_corners=False)
        return y[:, 0]


@dataclass
class FMGCheckpoint:
    model: FlareSegNet
    cfg: SegModelConfig
    metrics: Optional[SegMetrics] = None
    history: dict = field(default_factory=lambda: {"loss": []})
    step: int = 0

    def save(self, path) -> str:
        payload = {
            "format": FMG_FORMAT,
            "version": FMG_VERSION,
            "config": self.cfg.to_dict(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "history": self.history,
            "step": self.step,
            "state_dict": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
        }
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        buf = io.BytesIO()
        torch.save(payload, buf)
        with open(path, "wb") as f:
            f.write(buf.getvalue())
        return str(path)


def load_fmg(path) -> FMGCheckpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise BadCheckpoint(f"{path}: unreadable checkpoint ({e})") from None
    if not isinstance(payload, dict) or payload.get("format") != FMG_FORMAT:
        raise BadCheckpoint(f"{path}: not a mask-generator checkpoint")
    if payload.get("version") != FMG_VERSION:
        raise BadCheckpoint(f"{path}: unsupported version {payload.get('version')}")
    cfg = SegModelConfig.from_dict(payload["config"])
    model = FlareSegNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    m = payload.get("metrics")
    metrics = None if m is None else SegMetrics(m["miou"], m["macc"], tuple(m["per_class_iou"]),
                                                tuple(m.get("per_class_acc", ())))
    return FMGCheckpoint(model, cfg, metrics, payload.get("history", {"loss": []}), payload.get("step", 0))


# -- data --------------------------------------------------------------------------

def is_heldout(stem: str) -> bool:
    return zlib.crc32(stem.encode()) % 10 == 0


def load_corpus(corpus_dir, size=None):
    """Returns (stems, images N x 3 x H x W float32, masks N x H x W float32)."""
    paths = sorted(glob.glob(os.path.join(corpus_dir, "flare", "*.png")))
    if not paths:
        raise EmptyCorpus(f"no flare images under {corpus_dir}/flare")
    stems, imgs, masks = [], [], []
    for p in paths:
        stem = os.path.splitext(os.path.basename(p))[0]
        imgs.append(read_image(p).astype(np.float32))
        masks.append(read_mask(os.path.join(corpus_dir, "mask", f"{stem}.png")).bits.astype(np.float32))
        stems.append(stem)
    x = torch.from_numpy(np.stack(imgs)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack(masks))
    if size is not None and tuple(x.shape[-2:]) != tuple(size):
        x = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
        y = F.interpolate(y[:, None], size=tuple(size), mode="nearest")[:, 0]
    return stems, x, y


def split_indices(stems):
    held = [i for i, s in enumerate(stems) if is_heldout(s)]
    if not held:
        # tiny corpora: hold out the item with the smallest hash
        held = [min(range(len(stems)), key=lambda i: (zlib.crc32(stems[i].encode()), i))]
    train = [i for i in range(len(stems)) if i not in set(held)]
    if not train:
        raise EmptyCorpus("corpus too small to hold out a validation split")
    return train, held


@torch.no_grad()
def predict_probs(model, x, batch=16):
    model.eval()
    return torch.cat([torch.sigmoid(model(x[i:i + batch])) for i in range(0, len(x), batch)])


def evaluate_fmg(model, x, y) -> SegMetrics:
    probs = predict_probs(model, x)
    return metrics_from_confusion(confusion((probs >= 0.5).numpy(), y.numpy() > 0.5))


def train_fmg(corpus_dir, cfg: Optional[SegModelConfig] = None, iters: int = 2000, seed: int = 0,
              out_path=None) -> FMGCheckpoint:
    """Trains the mask generator; final metrics are measured on the ~10 % hash-held-out split."""
    cfg = (cfg or SegModelConfig()).validate()
    if iters < 1:
        raise BadSpec("iters must be >= 1")
    torch.use_deterministic_algorithms(True)
    stems, x, y = load_corpus(corpus_dir, cfg.input_size)
    train_idx, held_idx = split_indices(stems)
    torch.manual_seed(seed)
    model = FlareSegNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(seed)
    train_idx_t = torch.as_tensor(train_idx)
    history = {"loss": []}
    model.train()
    for it in range(iters):
        pick = train_idx_t[torch.randint(len(train_idx), (cfg.batch_size,), generator=gen)]
        prob = torch.sigmoid(model(x[pick]))
        loss = weighted_bce(prob, y[pick], cfg.class_weights)
        if not torch.isfinite(loss):
            raise DivergedLoss(f"mask-generator loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history["loss"].append(float(loss.detach()))
        if (it + 1) % 200 == 0:
            log.info("fmg iter %d loss %.4f", it + 1, np.mean(history["loss"][-200:]))
    metrics = evaluate_fmg(model, x[held_idx], y[held_idx])
    ckpt = FMGCheckpoint(model, cfg, metrics, history, iters)
    if out_path:
        ckpt.save(out_path)
    return ckpt


@torch.no_grad()
def infer_mask(ckpt: FMGCheckpoint, image) -> OccupancyMask:
    """Thresholded (0.5) flare probability, resized back to the native resolution by nearest neighbour."""
    if not isinstance(ckpt, FMGCheckpoint):
        raise BadCheckpoint("infer_mask needs a loaded mask-generator checkpoint")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatch(f"expected H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    x = torch.from_numpy(image).permute(2, 0, 1)[None]
    if (h, w) != tuple(ckpt.cfg.input_size):
        x = F.interpolate(x, size=tuple(ckpt.cfg.input_size), mode="bilinear", align_corners=False)
    bits = (predict_probs(ckpt.model, x) >= 0.5).float()
    if (h, w) != tuple(ckpt.cfg.input_size):
        bits = F.interpolate(bits[:, None], size=(h, w), mode="nearest")[:, 0]
    return OccupancyMask(bits[0].numpy().astype(np.uint8))


def infer_scene_masks(ckpt: FMGCheckpoint, scene: SceneDataset) -> SceneDataset:
    views = tuple(v.with_mask(infer_mask(ckpt, v.image)) for v in scene.views)
    return SceneDataset(views, scene_id=scene.scene_id, split=scene.split)
