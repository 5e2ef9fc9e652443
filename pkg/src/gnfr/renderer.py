"""Transformer-based generalizable renderer with flare-masked view attention.

Per target ray, points are sampled between near and far, projected into each
source view and their features gathered along the epipolar lines. A view
transformer aggregates the N per-view features of each point, with attention
to flare-masked (or out-of-view) samples suppressed, and a ray transformer
mixes the M point features along the ray. The two alternate ``n_blocks``
times; the mean point feature is decoded to RGB.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .errors import BadSpec, ShapeMismatch

MASK_MODES = ("multiply_renormalize", "multiply_raw")


@dataclass
class RendererConfig:
    feature_dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    M_samples: int = 32
    pos_enc_freqs: int = 6
    mlp_hidden: int = 64
    attn_mask_mode: str = "multiply_renormalize"
    encoder_channels: int = 16

    def validate(self) -> "RendererConfig":
        if self.n_blocks < 1:
            raise BadSpec("n_blocks must be >= 1")
        if self.n_heads < 1 or self.feature_dim % self.n_heads:
            raise BadSpec(f"feature_dim {self.feature_dim} not divisible by n_heads {self.n_heads}")
        if self.M_samples < 1:
            raise BadSpec("M_samples must be >= 1")
        if self.attn_mask_mode not in MASK_MODES:
            raise BadSpec(f"attn_mask_mode must be one of {MASK_MODES}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RendererConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BadSpec(f"unknown renderer config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SourceViews:
    """Tensor bundle for the N source views used to render one batch."""

    images: torch.Tensor   # N x H x W x 3
    K: torch.Tensor        # N x 3 x 3
    c2w: torch.Tensor      # N x 3 x 4
    masks: torch.Tensor    # N x H x W uint8
    indices: tuple = ()

    @property
    def hw(self):
        return tuple(self.images.shape[1:3])

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def from_views(cls, views, indices=(), dtype=torch.float32, use_masks: bool = True):
        h, w = views[0].hw
        if any(v.hw != (h, w) for v in views):
            raise ShapeMismatch("source views must share one image size")
        masks = [v.mask.bits if (use_masks and v.mask is not None) else np.zeros((h, w), np.uint8)
                 for v in views]
        return cls(
            images=torch.as_tensor(np.stack([v.image for v in views]), dtype=dtype),
            K=torch.as_tensor(np.stack([v.intrinsics for v in views]), dtype=dtype),
            c2w=torch.as_tensor(np.stack([v.pose_c2w for v in views]), dtype=dtype),
            masks=torch.as_tensor(np.stack(masks)).to(torch.uint8),
            indices=tuple(int(i) for i in indices),
        )


@dataclass
class EpipolarSamples:
    features: torch.Tensor    # B x M x N x d   encoder features
    rgb: torch.Tensor         # B x M x N x 3   full-resolution source colours
    point_mask: torch.Tensor  # B x M x N bool  flare-affected or out of view
    valid: torch.Tensor       # B x M x N bool  projection landed inside the view
    view_dirs: torch.Tensor   # B x M x N x 4   target-minus-source direction and cosine


# -- encoder -----------------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride)

    def forward(self, x):
        y = self.conv2(F.elu(self.conv1(x)))
        return F.elu(y + (x if self.skip is None else self.skip(x)))


class ResUNetEncoder(nn.Module):
    """Residual UNet producing d-channel features at 1/4 resolution.

    No normalization layers: every view is encoded independently and the
    receptive field stays local.
    """

    def __init__(self, out_dim=32, c=16):
        super().__init__()
        self.stem = nn.Conv2d(3, c, 3, 1, 1)
        self.down1 = ResBlock(c, 2 * c, stride=2)
        self.down2 = ResBlock(2 * c, 4 * c, stride=2)
        self.down3 = ResBlock(4 * c, 4 * c, stride=2)
        self.up = ResBlock(8 * c, 4 * c)
        self.out = nn.Conv2d(4 * c, out_dim, 1)

    def forward(self, images):
        """images: N x H x W x 3 in [0,1] -> N x H/4 x W/4 x d."""
        x = images.permute(0, 3, 1, 2) * 2.0 - 1.0
        x = F.elu(self.stem(x))
        x1 = self.down1(x)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        up = F.interpolate(x3, size=x2.shape[-2:], mode="bilinear", align_corners=False)
        y = self.out(self.up(torch.cat([up, x2], 1)))
        return y.permute(0, 2, 3, 1)


# -- attention pieces ----------------------------------------------------------

def masked_attention_weights(logits, point_mask, valid=None, mode="multiply_renormalize"):
    """Softmax over the last (view) axis with flare-masked entries suppressed.

    ``multiply_renormalize``: weights A * (1 - M) rescaled to sum to one, which
    equals a softmax restricted to unmasked views (computed that way, so masked
    entries get exactly zero weight and zero gradient). ``multiply_raw``:
    A * (1 - M) without rescaling. When every view of a point is masked the
    weights fall back to uniform over views with valid projections, or over
    all views if none is valid.
    """
    point_mask = point_mask.bool()
    while point_mask.ndim < logits.ndim:
        point_mask = point_mask.unsqueeze(-2)
    if valid is None:
        valid = torch.ones_like(point_mask)
    else:
        valid = valid.bool()
        while valid.ndim < logits.ndim:
            valid = valid.unsqueeze(-2)
    point_mask, valid = torch.broadcast_tensors(point_mask, valid)
    point_mask = point_mask.expand_as(logits)
    valid = valid.expand_as(logits)
    all_masked = point_mask.all(-1, keepdim=True)
    any_valid = valid.any(-1, keepdim=True)
    fallback_mask = torch.where(any_valid, ~valid, torch.zeros_like(valid))
    fallback = torch.softmax(torch.zeros_like(logits).masked_fill(fallback_mask, float("-inf")), -1)
    if mode == "multiply_renormalize":
        safe = torch.where(all_masked, torch.zeros_like(logits), logits)
        eff_mask = torch.where(all_masked, fallback_mask, point_mask)
        return torch.softmax(safe.masked_fill(eff_mask, float("-inf")), -1)
    if mode == "multiply_raw":
        w = torch.softmax(logits, -1) * (~point_mask).to(logits.dtype)
        return torch.where(all_masked, fallback, w)
    raise ValueError(f"unknown attention mask mode {mode!r}")


class ViewTransformerBlock(nn.Module):
    """Pre-norm cross-attention from a point's running feature to its N view features."""

    def __init__(self, d, heads, hidden, mask_mode):
        super().__init__()
        self.heads = heads
        self.mask_mode = mask_mode
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.norm_ff = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def attention_weights(self, q, kv, point_mask, valid):
        *lead, n, d = kv.shape
        h, dh = self.heads, d // self.heads
        Q = self.q(self.norm_q(q)).reshape(*lead, h, dh)
        K = self.k(self.norm_kv(kv)).reshape(*lead, n, h, dh)
        logits = torch.einsum("...hc,...nhc->...hn", Q, K) / math.sqrt(dh)
        return masked_attention_weights(logits, point_mask.unsqueeze(-2), valid.unsqueeze(-2),
                                        self.mask_mode)

    def forward(self, q, kv, point_mask, valid):
        *lead, n, d = kv.shape
        h, dh = self.heads, d // self.heads
        w = self.attention_weights(q, kv, point_mask, valid)
        V = self.v(self.norm_kv(kv)).reshape(*lead, n, h, dh)
        out = torch.einsum("...hn,...nhc->...hc", w, V).reshape(*lead, d)
        q = q + self.o(out)
        return q + self.ff(self.norm_ff(q))


class RayTransformerBlock(nn.Module):
    """Standard pre-norm self-attention encoder layer over the M points of a ray."""

    def __init__(self, d, heads, hidden):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.o = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x):
        B, M, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(B, M, 3, h, dh)
        q, k, v = qkv.unbind(2)
        att = torch.softmax(torch.einsum("bmhc,bnhc->bhmn", q, k) / math.sqrt(dh), -1)
        out = torch.einsum("bhmn,bnhc->bmhc", att, v).reshape(B, M, d)
        x = x + self.o(out)
        return x + self.ff(self.norm2(x))


def depth_encoding(depths, near, far, n_freqs):
    """Sinusoidal encoding of normalized depth, ... x M -> ... x M x 2F."""
    s = (depths - near) / (far - near)
    freqs = (2.0 ** torch.arange(n_freqs, dtype=depths.dtype)) * math.pi
    ang = s[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], -1)


class GNFRenderer(nn.Module):
    def __init__(self, cfg: Optional[RendererConfig] = None):
        super().__init__()
        cfg = (cfg or RendererConfig()).validate()
        self.cfg = cfg
        d = cfg.feature_dim
        self.encoder = ResUNetEncoder(d, cfg.encoder_channels)
        self.feat_proj = nn.Linear(d + 3, d)
        self.dir_proj = nn.Linear(4, d)
        self.var_proj = nn.Linear(d + 3, d)
        self.query_init = nn.Linear(2 * d, d)
        self.pos_proj = nn.Linear(2 * cfg.pos_enc_freqs, d)
        self.view_blocks = nn.ModuleList(
            ViewTransformerBlock(d, cfg.n_heads, cfg.mlp_hidden, cfg.attn_mask_mode)
            for _ in range(cfg.n_blocks))
        self.ray_blocks = nn.ModuleList(
            RayTransformerBlock(d, cfg.n_heads, cfg.mlp_hidden) for _ in range(cfg.n_blocks))
        self.head_norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(d, cfg.mlp_hidden), nn.ReLU(), nn.Linear(cfg.mlp_hidden, 3))

    # -- stages --------------------------------------------------------------

    def encode_views(self, images) -> torch.Tensor:
        """N x H x W x 3 -> N x H/4 x W/4 x d feature grids."""
        return self.encoder(images)

    def gather_epipolar(self, rays_o, rays_d, depths, src: SourceViews, grids) -> EpipolarSamples:
        points = rays_o[:, None, :] + depths[..., None] * rays_d[:, None, :]   # B x M x 3
        hw = src.hw
        feats, rgbs, pmask, valids, dirs = [], [], [], [], []
        for i in range(len(src)):
            uv, _, valid = geometry.project(points, K=src.K[i], c2w=src.c2w[i], hw=hw)
            f = geometry.sample_grid(grids[i], uv, hw)
            c = geometry.sample_grid(src.images[i], uv, hw)
            m = geometry.sample_mask_clamped(src.masks[i], uv).bool()
            keep = valid[..., None].to(f.dtype)
            feats.append(f * keep)
            rgbs.append(c * keep)
            pmask.append(m | ~valid)
            valids.append(valid)
            src_dir = points - src.c2w[i, :, 3]
            src_dir = src_dir / src_dir.norm(dim=-1, keepdim=True).clamp_min(1e-9)
            tgt_dir = rays_d[:, None, :].expand_as(src_dir)
            dirs.append(torch.cat([tgt_dir - src_dir, (tgt_dir * src_dir).sum(-1, keepdim=True)], -1))
        return EpipolarSamples(torch.stack(feats, 2), torch.stack(rgbs, 2), torch.stack(pmask, 2),
                               torch.stack(valids, 2), torch.stack(dirs, 2))

    def view_tokens(self, samples: EpipolarSamples) -> torch.Tensor:
        kv = self.feat_proj(torch.cat([samples.features, samples.rgb], -1))
        return kv + self.dir_proj(samples.view_dirs)

    def initial_query(self, samples: EpipolarSamples) -> torch.Tensor:
        """Running point feature before the first block: masked mean and variance over views."""
        raw = torch.cat([samples.features, samples.rgb], -1)
        w = masked_attention_weights(torch.zeros_like(samples.point_mask, dtype=raw.dtype),
                                     samples.point_mask, samples.valid, "multiply_renormalize")
        mean = (w[..., None] * raw).sum(-2)
        var = (w[..., None] * (raw - mean[..., None, :]) ** 2).sum(-2)
        return self.query_init(torch.cat([self.feat_proj(mean), self.var_proj(var)], -1))

    def masked_view_attention(self, samples: EpipolarSamples, q=None, block: int = 0):
        """One view-transformer block over the samples; B x M x d."""
        if q is None:
            q = self.initial_query(samples)
        return self.view_blocks[block](q, self.view_tokens(samples), samples.point_mask, samples.valid)

    def ray_transform_and_decode(self, point_features, depth_tokens=None):
        """Final ray-transformer block, mean over points, MLP head, sigmoid."""
        x = point_features if depth_tokens is None else point_features + depth_tokens
        x = self.ray_blocks[-1](x)
        return self.decode(x)

    def decode(self, point_features):
        return torch.sigmoid(self.head(self.head_norm(point_features.mean(1))))

    # -- full pass -------------------------------------------------------------

    def forward(self, rays_o, rays_d, depths, near, far, src: SourceViews, grids=None):
        if grids is None:
            grids = self.encode_views(src.images)
        samples = self.gather_epipolar(rays_o, rays_d, depths, src, grids)
        return self.render_samples(samples, depths, near, far)

    def render_samples(self, samples: EpipolarSamples, depths, near, far):
        kv = self.view_tokens(samples)
        q = self.initial_query(samples)
        pe = self.pos_proj(depth_encoding(depths, near, far, self.cfg.pos_enc_freqs))
        for vb, rb in zip(self.view_blocks, self.ray_blocks):
            q = vb(q, kv, samples.point_mask, samples.valid)
            q = rb(q + pe)
        return self.decode(q)


def render_rays(rays, selection, scene, model: GNFRenderer, use_masks: bool = True,
                chunk: int = 1024, grids=None, src: Optional[SourceViews] = None):
    """Renders ``rays`` from the selection's source views of ``scene``; B x 3."""
    dtype = next(model.parameters()).dtype
    if src is None:
        views = [scene[i] for i in selection.source_indices]
        src = SourceViews.from_views(views, selection.source_indices, dtype=dtype, use_masks=use_masks)
    near, far = scene[0].near, scene[0].far
    if rays.depths is None:
        rays.depths = geometry.sample_depths(near, far, model.cfg.M_samples, n_rays=len(rays),
                                             dtype=torch.float64)
    if grids is None:
        grids = model.encode_views(src.images)
    out = []
    for s in range(0, len(rays), chunk):
        sl = slice(s, s + chunk)
        out.append(model(rays.origins[sl].to(dtype), rays.directions[sl].to(dtype),
                         rays.depths[sl].to(dtype), near, far, src, grids))
    return torch.cat(out, 0)
