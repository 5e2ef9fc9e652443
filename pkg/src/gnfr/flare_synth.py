"""Synthetic flare data: affine-augmented flare compositing, flare corpora for
mask-generator training, and procedurally rendered multi-view toy scenes.
"""

from __future__ import annotations

import glob
import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import BadSpec, DegenerateTransform, EmptyCorpus, ShapeMismatch
from .geometry import intrinsics, look_at
from .scene_io import (CameraView, OccupancyMask, SceneDataset, read_image, read_mask,
                       write_image, write_mask)

log = logging.getLogger(__name__)

ROTATION_RANGE = (-np.pi, np.pi)
SCALE_RANGE = (0.5, 1.5)
TRANSLATION_FRAC = 0.25
SHEAR_RANGE = (-0.2, 0.2)
PATTERN_THRESHOLD = 0.03  # luminance above which a pattern pixel is annotated as flare

LUMA = np.array([0.299, 0.587, 0.114])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class AffineParams:
    rotation: float = 0.0
    scale: tuple = (1.0, 1.0)
    translation: tuple = (0.0, 0.0)   # pixels (x, y)
    shear: float = 0.0
    flip: tuple = (False, False)      # (horizontal, vertical)

    def linear(self) -> np.ndarray:
        """2x2 linear part acting on (x, y) offsets from the image center."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, np.tan(self.shear)], [0.0, 1.0]])
        scale = np.diag([float(self.scale[0]), float(self.scale[1])])
        flip = np.diag([-1.0 if self.flip[0] else 1.0, -1.0 if self.flip[1] else 1.0])
        return rot @ shear @ scale @ flip


IDENTITY = AffineParams()


def sample_affine(rng_seed: int, size=(128, 128)) -> AffineParams:
    """Random flare placement; ``size`` = (h, w) sets the translation range."""
    rng = derive_rng(rng_seed)
    h, w = size
    return AffineParams(
        rotation=float(rng.uniform(*ROTATION_RANGE)),
        scale=tuple(float(s) for s in rng.uniform(*SCALE_RANGE, size=2)),
        translation=(float(rng.uniform(-TRANSLATION_FRAC, TRANSLATION_FRAC) * w),
                     float(rng.uniform(-TRANSLATION_FRAC, TRANSLATION_FRAC) * h)),
        shear=float(rng.uniform(*SHEAR_RANGE)),
        flip=tuple(bool(b) for b in rng.integers(0, 2, size=2)),
    )


def _warp(src: np.ndarray, params: AffineParams, out_hw, order: int) -> np.ndarray:
    """Warps ``src`` (h x w [x c]) onto an ``out_hw`` canvas.

    The source is first stretched to the output extent, then the affine map is
    applied about the canvas center. Regions mapping outside the source are 0.
    """
    sh, sw = src.shape[:2]
    oh, ow = out_hw
    A = params.linear()
    if abs(np.linalg.det(A)) < 1e-6:
        raise DegenerateTransform(f"affine linear part is singular (det={np.linalg.det(A):.3g})")
    stretch = np.diag([ow / sw, oh / sh])
    fwd = A @ stretch
    # pixel-center coordinates: index i <-> i + 0.5
    src_c = np.array([sw / 2.0, sh / 2.0])
    out_c = np.array([ow / 2.0, oh / 2.0]) + np.asarray(params.translation, dtype=np.float64)
    inv = np.linalg.inv(fwd)
    # out index p -> src index q: q + .5 = inv @ (p + .5 - out_c) + src_c, in (x, y)
    offset_xy = src_c - 0.5 - inv @ (out_c - 0.5)
    # scipy works in (row, col)
    swap = np.array([[0, 1], [1, 0]])
    matrix = swap @ inv @ swap
    offset = swap @ offset_xy
    if src.ndim == 2:
        return ndimage.affine_transform(src, matrix, offset, output_shape=(oh, ow),
                                        order=order, mode="grid-constant", cval=0.0)
    return np.stack([
        ndimage.affine_transform(src[..., k], matrix, offset, output_shape=(oh, ow),
                                 order=order, mode="grid-constant", cval=0.0)
        for k in range(src.shape[2])
    ], -1)


def warp_image(image, params: AffineParams, out_hw=None) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return _warp(image, params, out_hw or image.shape[:2], order=1)


def warp_mask(bits, params: AffineParams, out_hw=None) -> np.ndarray:
    """Nearest-neighbour warp followed by binarization at 0.5."""
    bits = np.asarray(bits, dtype=np.float64)
    return (_warp(bits, params, out_hw or bits.shape[:2], order=0) >= 0.5).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class FlarePattern:
    image: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.mask).astype(np.uint8)
        if image.ndim != 3 or image.shape[2] != 3 or image.shape[:2] != mask.shape:
            raise ShapeMismatch(f"pattern {self.name!r}: image {image.shape} vs mask {mask.shape}")
        if image.size == 0:
            raise BadSpec("empty flare pattern")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)

    def luminance(self) -> np.ndarray:
        return self.image @ LUMA


def composite_flare(base: CameraView, pattern: FlarePattern, params: AffineParams):
    """Adds a warped flare pattern to ``base`` in linear RGB.

    Returns the flared view (carrying the new mask) and the mask itself. Image
    and mask are warped by the same transform; the image bilinearly, the mask
    by nearest neighbour.
    """
    hw = base.hw
    flare = warp_image(pattern.image, params, hw)
    bits = warp_mask(pattern.mask, params, hw)
    out = np.clip(base.image + flare, 0.0, 1.0)
    mask = OccupancyMask(bits)
    return base.with_image(out).with_mask(mask), mask


# -- procedural content -----------------------------------------------------

def procedural_texture(res: int, seed: int) -> np.ndarray:
    """Smooth colourful texture in linear RGB (stand-in for a photo corpus)."""
    rng = derive_rng(seed, 7)
    h = w = res
    ys, xs = np.mgrid[0:h, 0:w] / res
    img = np.zeros((h, w, 3))
    base = rng.uniform(0.1, 0.6, 3)
    for _ in range(6):
        freq = rng.uniform(1.0, 6.0) * np.array([np.cos(a := rng.uniform(0, np.pi)), np.sin(a)])
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(-0.25, 0.25, 3)
        img += np.sin(2 * np.pi * (freq[0] * xs + freq[1] * ys) + phase)[..., None] * color
    coarse = rng.uniform(-0.2, 0.2, (4, 4, 3))
    img += ndimage.zoom(coarse, (h / 4, w / 4, 1), order=3, mode="nearest")[:h, :w]
    # occasional bright patches so that "bright" alone does not mean "flare"
    for _ in range(rng.integers(0, 3)):
        cy, cx = rng.uniform(0, 1, 2)
        r = rng.uniform(0.05, 0.15)
        blob = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.uniform(0.2, 0.5, 3)
    return np.clip(img + base, 0.0, 1.0)


def procedural_flare_pattern(res: int, seed: int, threshold: float = PATTERN_THRESHOLD) -> FlarePattern:
    """A flare-like pattern on a black background with its annotation mask.

    Glow core, radial streaks, a halo ring and a few ghosts, tinted. Pixels
    below ``threshold`` luminance are zeroed; the annotation covers the rest
    plus a one-pixel margin, so resampled flare energy stays inside the mask.
    """
    rng = derive_rng(seed, 11)
    ys, xs = (np.mgrid[0:res, 0:res] + 0.5) / res - 0.5
    r = np.hypot(xs, ys)
    theta = np.arctan2(ys, xs)
    size = rng.uniform(0.03, 0.07)
    glow = np.exp(-(r / size) ** 2) * rng.uniform(0.6, 1.0)
    n_streaks = rng.integers(2, 7)
    streak_phase = rng.uniform(0, np.pi)
    streaks = np.abs(np.cos(n_streaks * (theta + streak_phase))) ** 40
    streaks = streaks * np.exp(-r / (size * rng.uniform(1.2, 2.2))) * rng.uniform(0.3, 0.7)
    ring_r = rng.uniform(1.4, 2.2) * size
    halo = np.exp(-((r - ring_r) / (0.15 * size)) ** 2) * rng.uniform(0.1, 0.3)
    lum = glow + streaks + halo
    ghost_dir = rng.uniform(0, 2 * np.pi)
    for _ in range(rng.integers(1, 4)):
        d = rng.uniform(0.15, 0.35)
        gx, gy = d * np.cos(ghost_dir), d * np.sin(ghost_dir)
        gr = rng.uniform(0.02, 0.05)
        lum = lum + (np.hypot(xs - gx, ys - gy) < gr) * rng.uniform(0.1, 0.25)
    tint = rng.uniform(0.6, 1.0, 3)
    tint /= tint @ LUMA
    image = np.clip(lum[..., None] * tint, 0.0, 1.0)
    support = image @ LUMA > threshold
    image = image * support[..., None]
    mask = ndimage.binary_dilation(support).astype(np.uint8)
    return FlarePattern(image, mask, name=f"pattern{seed}")


def write_pattern(pattern: FlarePattern, root, stem: str):
    write_image(os.path.join(root, "images", f"{stem}.png"), pattern.image)
    write_mask(os.path.join(root, "masks", f"{stem}.png"), pattern.mask)


def load_patterns(root) -> list:
    paths = sorted(glob.glob(os.path.join(root, "images", "*.png")))
    patterns = []
    for p in paths:
        stem = os.path.splitext(os.path.basename(p))[0]
        mask = read_mask(os.path.join(root, "masks", f"{stem}.png"))
        patterns.append(FlarePattern(read_image(p), mask.bits, name=stem))
    return patterns


def list_images(root) -> list:
    return sorted(p for ext in ("png", "jpg", "jpeg")
                  for p in glob.glob(os.path.join(root, f"*.{ext}")))


def build_flare_corpus(images_dir, patterns_dir, n_out: int, rng_seed: int, out_dir,
                       size: Optional[int] = None) -> str:
    """Writes ``n_out`` (flare, clean, mask) triples under out/{flare,clean,mask}/NNNNN.png.

    Each triple derives its own seed from (rng_seed, index), so any subset of
    indices can be produced independently.
    """
    bases = list_images(images_dir)
    patterns = load_patterns(patterns_dir)
    if not bases or not patterns:
        raise EmptyCorpus(f"need base images and patterns, found {len(bases)} and {len(patterns)}")
    base_cache = {}
    for i in range(n_out):
        rng = derive_rng(rng_seed, i)
        bi = int(rng.integers(len(bases)))
        pi = int(rng.integers(len(patterns)))
        if bi not in base_cache:
            img = read_image(bases[bi])
            if size is not None and img.shape[:2] != (size, size):
                img = ndimage.zoom(img, (size / img.shape[0], size / img.shape[1], 1), order=1)
            base_cache[bi] = img
        base = base_cache[bi]
        params = sample_affine(int(rng.integers(2**31)), size=base.shape[:2])
        flare = warp_image(patterns[pi].image, params, base.shape[:2])
        bits = warp_mask(patterns[pi].mask, params, base.shape[:2])
        stem = f"{i:05d}"
        write_image(os.path.join(out_dir, "flare", f"{stem}.png"), np.clip(base + flare, 0, 1))
        write_image(os.path.join(out_dir, "clean", f"{stem}.png"), base)
        write_mask(os.path.join(out_dir, "mask", f"{stem}.png"), bits)
    return str(out_dir)


# -- toy multi-view scenes ----------------------------------------------------

@dataclass
class ToySceneConfig:
    preset: str = "plane"        # "plane" or "box"
    n_views: int = 12
    resolution: int = 64
    fov_deg: float = 50.0
    radius: float = 4.0
    arc_deg: float = 50.0
    elevation_deg: float = 8.0
    supersample: int = 3
    poses: Optional[list] = None  # explicit 3x4 c2w poses override the arc

    def validate(self):
        if self.preset not in ("plane", "box"):
            raise BadSpec(f"unknown preset {self.preset!r}")
        n = len(self.poses) if self.poses is not None else self.n_views
        if n < 3:
            raise BadSpec(f"need at least 3 views, got {n}")
        if self.resolution < 8:
            raise BadSpec(f"resolution {self.resolution} too small")
        if not 0 < self.fov_deg < 170:
            raise BadSpec(f"bad field of view {self.fov_deg}")
        if self.supersample < 1:
            raise BadSpec("supersample must be >= 1")


class _Texture:
    """Sum of random sinusoids over a 2-D surface parameterization."""

    def __init__(self, rng, n_waves=8, max_freq=1.2):
        self.base = rng.uniform(0.25, 0.55, 3)
        self.waves = []
        for _ in range(n_waves):
            a = rng.uniform(0, np.pi)
            f = rng.uniform(0.3, max_freq)
            self.waves.append((f * np.cos(a), f * np.sin(a), rng.uniform(0, 2 * np.pi),
                               rng.uniform(-0.2, 0.2, 3)))

    def __call__(self, s, t):
        out = np.broadcast_to(self.base, s.shape + (3,)).copy()
        for fx, fy, ph, col in self.waves:
            out += np.sin(2 * np.pi * (fx * s + fy * t) + ph)[..., None] * col
        return np.clip(out, 0.02, 0.98)


class _ToyWorld:
    LIGHT = np.array([-0.4, -0.7, -0.6]) / np.linalg.norm([-0.4, -0.7, -0.6])

    def __init__(self, preset, rng):
        self.preset = preset
        self.backdrop = _Texture(rng)
        self.plane_z = 0.0 if preset == "plane" else 1.0
        if preset == "box":
            self.box_lo = np.array([-0.6, -0.6, -0.6])
            self.box_hi = np.array([0.6, 0.6, 0.6])
            self.face_colors = rng.uniform(0.2, 0.8, (6, 3))
            self.checker = 0.3

    def shade(self, o, d):
        """Colour and hit distance for rays (N x 3 each)."""
        t_plane = (self.plane_z - o[:, 2]) / d[:, 2]
        hit = o + t_plane[:, None] * d
        color = self.backdrop(hit[:, 0], hit[:, 1])
        lam = 0.55 + 0.45 * max(0.0, float(-self.LIGHT[2]))
        color = color * lam
        t = t_plane
        if self.preset == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                t0 = (self.box_lo - o) * inv
                t1 = (self.box_hi - o) * inv
            tmin = np.minimum(t0, t1)
            tmax = np.maximum(t0, t1)
            t_in = tmin.max(1)
            t_out = tmax.min(1)
            box_hit = (t_in <= t_out) & (t_in > 0)
            axis = tmin.argmax(1)
            p = o + t_in[:, None] * d
            sign = np.sign(-d[np.arange(len(d)), axis])
            normal = np.zeros_like(d)
            normal[np.arange(len(d)), axis] = sign
            face = axis * 2 + (sign > 0)
            # checker on the two in-face coordinates
            uv = np.where(np.eye(3, dtype=bool)[axis], 0.0, p)
            cells = np.floor(uv / self.checker).sum(1)
            chk = np.where(cells % 2 == 0, 1.0, 0.55)
            diffuse = np.clip(-(normal @ self.LIGHT), 0.0, 1.0)
            box_color = self.face_colors[face] * chk[:, None] * (0.35 + 0.65 * diffuse)[:, None]
            color = np.where(box_hit[:, None], box_color, color)
            t = np.where(box_hit, t_in, t)
        return np.clip(color, 0.0, 1.0), t


def toy_poses(cfg: ToySceneConfig) -> list:
    if cfg.poses is not None:
        return [np.asarray(p, dtype=np.float64).reshape(3, 4) for p in cfg.poses]
    poses = []
    n = cfg.n_views
    for i in range(n):
        az = np.deg2rad(-cfg.arc_deg / 2 + cfg.arc_deg * i / max(n - 1, 1))
        el = np.deg2rad(cfg.elevation_deg * (1 if i % 2 == 0 else -1) * 0.5 + cfg.elevation_deg * 0.5)
        eye = cfg.radius * np.array([np.sin(az) * np.cos(el), -np.sin(el), -np.cos(az) * np.cos(el)])
        poses.append(look_at(eye, np.zeros(3)))
    return poses


def toy_intrinsics(cfg: ToySceneConfig) -> np.ndarray:
    f = 0.5 * cfg.resolution / np.tan(np.deg2rad(cfg.fov_deg) / 2)
    return intrinsics(f, f, cfg.resolution / 2.0, cfg.resolution / 2.0)


def render_toy_view(world: _ToyWorld, K, c2w, res: int, supersample: int):
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    vs, us = np.mgrid[0:res, 0:res]
    shape = (res, res, s, s)
    pix_u = np.broadcast_to(us[..., None, None] + offs[None, None, None, :], shape).reshape(-1)
    pix_v = np.broadcast_to(vs[..., None, None] + offs[None, None, :, None], shape).reshape(-1)
    homo = np.stack([pix_u, pix_v, np.ones_like(pix_u)], -1)
    d = homo @ np.linalg.inv(K).T @ c2w[:, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(c2w[:, 3], d.shape)
    color, t = world.shade(o, d)
    image = color.reshape(res, res, s * s, 3).mean(2)
    return image, t


def generate_toy_scene(cfg: ToySceneConfig, rng_seed: int, scene_id: Optional[str] = None) -> SceneDataset:
    """Renders a Lambertian toy scene from cameras on an arc (exact poses recorded)."""
    cfg.validate()
    rng = derive_rng(rng_seed, 3)
    world = _ToyWorld(cfg.preset, rng)
    K = toy_intrinsics(cfg)
    poses = toy_poses(cfg)
    renders = [render_toy_view(world, K, p, cfg.resolution, cfg.supersample) for p in poses]
    t_all = np.concatenate([t for _, t in renders])
    if not np.all(np.isfinite(t_all)) or (t_all <= 0).any():
        raise BadSpec("some camera rays miss the scene; narrow the arc or field of view")
    near, far = 0.9 * float(t_all.min()), 1.1 * float(t_all.max())
    views = tuple(CameraView(img, K, pose, near, far, None, name=f"{i:03d}")
                  for i, ((img, _), pose) in enumerate(zip(renders, poses)))
    return SceneDataset(views, scene_id=scene_id or f"{cfg.preset}{rng_seed}", split="train")


def apply_flare(scene: SceneDataset, patterns: Sequence[FlarePattern], rng_seed: int) -> SceneDataset:
    """Composites one randomly placed pattern per view; returns the flared scene with masks."""
    if not patterns:
        raise EmptyCorpus("no flare patterns given")
    views = []
    for i, v in enumerate(scene.views):
        rng = derive_rng(rng_seed, 101, i)
        pattern = patterns[int(rng.integers(len(patterns)))]
        params = sample_affine(int(rng.integers(2**31)), size=v.hw)
        flared, _ = composite_flare(v, pattern, params)
        views.append(flared)
    return SceneDataset(tuple(views), scene_id=scene.scene_id, split=scene.split)


def plane_depth(o, d, plane_z: float = 0.0):
    """Distance along unit rays to the toy plane z = plane_z."""
    return (plane_z - o[..., 2]) / d[..., 2]
