"""Pinhole camera math: rays, depth samples, projection and grid lookups.

Conventions: camera-to-world poses with x-right / y-down / z-forward axes.
Continuous pixel coordinates put the center of pixel (u, v) at (u + 0.5, v + 0.5),
so pixel (u, v) covers [u, u+1) x [v, v+1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch

from .errors import BadBounds, OutOfBounds, ShapeMismatch


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.tensor(np.asarray(x), dtype=dtype or torch.float64)


@dataclass
class RayBundle:
    origins: torch.Tensor            # B x 3
    directions: torch.Tensor         # B x 3, unit length
    target_pixel: torch.Tensor       # B x 2 integer (u, v)
    depths: Optional[torch.Tensor] = None        # B x M
    target_rgb: Optional[torch.Tensor] = None    # B x 3
    target_mask_bit: Optional[torch.Tensor] = None  # B

    def __len__(self):
        return self.origins.shape[0]

    def points(self) -> torch.Tensor:
        """Sample positions o + t d, shape B x M x 3."""
        return self.origins[:, None, :] + self.depths[..., None] * self.directions[:, None, :]


@dataclass
class FeatureGrid:
    values: torch.Tensor   # h' x w' x d
    view_index: int = 0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeMismatch(f"feature grid must be h x w x d, got {tuple(self.values.shape)}")
        if not torch.isfinite(self.values).all():
            raise ValueError("feature grid contains non-finite values")


def rays_for_pixels(view, pixels, dtype=torch.float64) -> RayBundle:
    """Rays through pixel centers of ``view``; ``pixels`` is B x 2 (u=col, v=row)."""
    pixels = torch.as_tensor(np.asarray(pixels) if not isinstance(pixels, torch.Tensor) else pixels)
    pixels = pixels.reshape(-1, 2).long()
    h, w = view.hw
    u, v = pixels[:, 0], pixels[:, 1]
    if ((u < 0) | (u >= w) | (v < 0) | (v >= h)).any():
        raise OutOfBounds(f"pixel coordinates outside {w}x{h} image")
    K = _t(view.intrinsics, dtype)
    c2w = _t(view.pose_c2w, dtype)
    homo = torch.stack([u.to(dtype) + 0.5, v.to(dtype) + 0.5, torch.ones_like(u, dtype=dtype)], -1)
    cam = homo @ torch.linalg.inv(K).T
    d = cam @ c2w[:, :3].T
    d = d / d.norm(dim=-1, keepdim=True)
    o = c2w[:, 3].expand_as(d).clone()
    rgb = _t(view.image, dtype)[v, u]
    mask_bit = None
    if view.mask is not None:
        mask_bit = torch.from_numpy(view.mask.bits.copy())[v, u]
    return RayBundle(o, d, pixels, target_rgb=rgb, target_mask_bit=mask_bit)


def rays_for_camera(K, c2w, hw, pixels, dtype=torch.float64):
    """Ray origins and directions for an arbitrary pose (no image attached)."""
    K = _t(K, dtype).reshape(3, 3)
    c2w = _t(c2w, dtype).reshape(3, 4)
    pixels = torch.as_tensor(pixels).reshape(-1, 2).long()
    h, w = hw
    if ((pixels[:, 0] < 0) | (pixels[:, 0] >= w) | (pixels[:, 1] < 0) | (pixels[:, 1] >= h)).any():
        raise OutOfBounds(f"pixel coordinates outside {w}x{h} image")
    homo = torch.cat([pixels.to(dtype) + 0.5, torch.ones(len(pixels), 1, dtype=dtype)], -1)
    d = homo @ torch.linalg.inv(K).T @ c2w[:, :3].T
    d = d / d.norm(dim=-1, keepdim=True)
    return c2w[:, 3].expand_as(d).clone(), d


def sample_depths(near: float, far: float, n_samples: int, mode: str = "deterministic",
                  seed: Union[int, torch.Generator, None] = None, n_rays: Optional[int] = None,
                  dtype=torch.float64) -> torch.Tensor:
    """Uniform depth samples in [near, far], one per equal-width bin.

    ``deterministic`` returns bin midpoints; ``stratified`` draws one uniform
    sample inside each bin. With ``n_rays`` the result is n_rays x M.
    """
    if n_samples < 1:
        raise BadBounds(f"need at least one sample, got {n_samples}")
    if not near < far:
        raise BadBounds(f"need near < far, got near={near} far={far}")
    shape = (n_samples,) if n_rays is None else (n_rays, n_samples)
    step = (far - near) / n_samples
    idx = torch.arange(n_samples, dtype=dtype)
    if mode == "deterministic":
        offsets = torch.full(shape, 0.5, dtype=dtype)
    elif mode == "stratified":
        gen = seed
        if not isinstance(seed, torch.Generator):
            gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        # keep samples strictly inside their bin
        offsets = torch.rand(shape, generator=gen, dtype=dtype).clamp(1e-6, 1 - 1e-6)
    else:
        raise ValueError(f"unknown depth sampling mode {mode!r}")
    return near + (idx + offsets) * step


def world_to_camera(x, c2w):
    c2w = _t(c2w, x.dtype)
    R, c = c2w[:, :3], c2w[:, 3]
    return (x - c) @ R


def project(x, view=None, K=None, c2w=None, hw=None):
    """Projects world points onto a view's image plane.

    Returns ``(uv, depth, valid)`` with uv in continuous pixel coordinates,
    depth the camera-space z, and valid = depth > 0 and uv inside the image.
    Accepts a single 3-vector or any ... x 3 batch.
    """
    if view is not None:
        K, c2w, hw = view.intrinsics, view.pose_c2w, view.hw
    x = _t(x)
    K = _t(K, x.dtype).reshape(3, 3)
    cam = world_to_camera(x, _t(c2w, x.dtype).reshape(3, 4))
    depth = cam[..., 2]
    pix = cam @ K.T
    # avoid division blow-ups for points on the camera plane; they are invalid anyway
    z = torch.where(depth.abs() < 1e-12, torch.full_like(depth, 1e-12), pix[..., 2])
    uv = pix[..., :2] / z[..., None]
    h, w = hw
    valid = (depth > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < w) & (uv[..., 1] >= 0) & (uv[..., 1] < h)
    return uv, depth, valid


def _bilinear_lattice(values, gx, gy):
    """Samples ``values`` (h x w x d) at lattice coords (gx, gy), clamped to the border."""
    h, w = values.shape[:2]
    gx = gx.clamp(0, w - 1)
    gy = gy.clamp(0, h - 1)
    x0 = gx.floor().long().clamp(max=w - 2) if w > 1 else torch.zeros_like(gx, dtype=torch.long)
    y0 = gy.floor().long().clamp(max=h - 2) if h > 1 else torch.zeros_like(gy, dtype=torch.long)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (gx - x0.to(gx.dtype))[..., None].to(values.dtype)
    fy = (gy - y0.to(gy.dtype))[..., None].to(values.dtype)
    v00, v01 = values[y0, x0], values[y0, x1]
    v10, v11 = values[y1, x0], values[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bottom = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bottom * fy


def bilinear(grid: FeatureGrid, uv) -> torch.Tensor:
    """Bilinear lookup at lattice coordinates ``uv`` = (x, y); integer uv hits grid cells exactly."""
    values = grid.values if isinstance(grid, FeatureGrid) else _t(grid)
    uv = _t(uv)
    h, w = values.shape[:2]
    gx, gy = uv[..., 0], uv[..., 1]
    if ((gx < 0) | (gx > w - 1) | (gy < 0) | (gy > h - 1)).any():
        raise OutOfBounds(f"lookup outside {w}x{h} grid")
    return _bilinear_lattice(values, gx, gy)


def image_to_grid(uv, image_hw, grid_hw):
    """Maps continuous image pixel coords to lattice coords of a (possibly coarser) grid."""
    sx = grid_hw[1] / image_hw[1]
    sy = grid_hw[0] / image_hw[0]
    return torch.stack([uv[..., 0] * sx - 0.5, uv[..., 1] * sy - 0.5], -1)


def sample_grid(values, uv, image_hw):
    """Bilinear lookup of an h' x w' x d grid at image-space uv, border-clamped."""
    g = image_to_grid(uv, image_hw, values.shape[:2])
    return _bilinear_lattice(values, g[..., 0], g[..., 1])


def sample_mask_bit(mask, uv):
    """Nearest-neighbour mask lookup at continuous image coordinates."""
    bits = mask.bits if hasattr(mask, "bits") else mask
    bits = bits if isinstance(bits, torch.Tensor) else torch.from_numpy(np.array(bits))
    uv = _t(uv)
    h, w = bits.shape
    u, v = uv[..., 0], uv[..., 1]
    if ((u < 0) | (u >= w) | (v < 0) | (v >= h)).any():
        raise OutOfBounds(f"mask lookup outside {w}x{h} image")
    return bits[v.floor().long(), u.floor().long()]


def sample_mask_clamped(bits, uv):
    """Like :func:`sample_mask_bit` but clamps coordinates; callers handle validity."""
    h, w = bits.shape
    u = uv[..., 0].floor().long().clamp(0, w - 1)
    v = uv[..., 1].floor().long().clamp(0, h - 1)
    return bits[v, u]


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world pose at ``eye`` looking at ``target`` (y-down world)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    x = np.cross(np.asarray(down, dtype=np.float64), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.concatenate([np.stack([x, y, f], 1), eye[:, None]], 1)


def intrinsics(fx, fy, cx, cy) -> np.ndarray:
    return np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
