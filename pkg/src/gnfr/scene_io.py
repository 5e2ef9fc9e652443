"""Multi-view scene containers and the on-disk dataset format.

A scene directory looks like::

    scene_root/
      cameras.json   {"h", "w", "near", "far", "views": [{"file", "mask", "K", "c2w"}, ...]}
      images/*.png   8-bit RGB, sRGB-encoded
      masks/*.png    8-bit grayscale, >= 128 means flare

Pixels are decoded to linear RGB on load and re-encoded on save.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import BadBounds, BadPose, BadSpec, MissingFile, ShapeMismatch

POSE_TOL = 1e-5
MASK_THRESHOLD = 128


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def encode_8bit(image) -> np.ndarray:
    """Linear [0,1] floats -> sRGB uint8."""
    return np.round(linear_to_srgb(image) * 255.0).astype(np.uint8)


def decode_8bit(data) -> np.ndarray:
    return srgb_to_linear(np.asarray(data, dtype=np.float64) / 255.0)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class OccupancyMask:
    """Binary flare map, 1 = flare-affected."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be 0 or 1")
        object.__setattr__(self, "bits", _frozen(bits, np.uint8))

    @property
    def occupancy(self) -> float:
        return float(np.count_nonzero(self.bits)) / self.bits.size

    @property
    def shape(self):
        return self.bits.shape

    @classmethod
    def zeros(cls, h: int, w: int) -> "OccupancyMask":
        return cls(np.zeros((h, w), np.uint8))


def check_rotation(c2w, tol: float = POSE_TOL) -> float:
    """Returns ||R^T R - I||_inf, raising BadPose above ``tol``."""
    R = np.asarray(c2w, dtype=np.float64)[:3, :3]
    err = float(np.abs(R.T @ R - np.eye(3)).max())
    if not err < tol:
        raise BadPose(f"rotation is not orthonormal (||R^T R - I||_inf = {err:.3g})")
    return err


@dataclass(frozen=True, eq=False)
class CameraView:
    image: np.ndarray
    intrinsics: np.ndarray
    pose_c2w: np.ndarray
    near: float
    far: float
    mask: Optional[OccupancyMask] = None
    name: str = ""

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeMismatch(f"{self.name or 'view'}: image must be HxWx3, got {image.shape}")
        h, w = image.shape[:2]
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0):
            raise BadSpec(f"{self.name or 'view'}: focal lengths must be positive")
        if not (0 <= cx < w and 0 <= cy < h):
            raise BadSpec(f"{self.name or 'view'}: principal point ({cx}, {cy}) outside image")
        pose = np.asarray(self.pose_c2w, dtype=np.float64).reshape(3, 4)
        check_rotation(pose)
        if not (0 < self.near < self.far):
            raise BadBounds(f"need 0 < near < far, got near={self.near} far={self.far}")
        if self.mask is not None and self.mask.shape != (h, w):
            raise ShapeMismatch(
                f"{self.name or 'view'}: mask shape {self.mask.shape} != image shape {(h, w)}"
            )
        object.__setattr__(self, "image", _frozen(image, np.float64))
        object.__setattr__(self, "intrinsics", _frozen(K, np.float64))
        object.__setattr__(self, "pose_c2w", _frozen(pose, np.float64))
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))

    @property
    def hw(self):
        return self.image.shape[:2]

    @property
    def center(self) -> np.ndarray:
        return self.pose_c2w[:, 3]

    @property
    def occupancy(self) -> Optional[float]:
        return None if self.mask is None else self.mask.occupancy

    def with_mask(self, mask: Optional[OccupancyMask]) -> "CameraView":
        return replace(self, mask=mask)

    def with_image(self, image) -> "CameraView":
        return replace(self, image=image)


@dataclass(frozen=True, eq=False)
class SceneDataset:
    views: tuple
    scene_id: str = "scene"
    split: str = "train"

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 3:
            raise BadSpec(f"scene {self.scene_id!r} needs at least 3 views, got {len(views)}")
        shapes = {v.hw for v in views}
        if len(shapes) != 1:
            raise ShapeMismatch(f"scene {self.scene_id!r} mixes image sizes {sorted(shapes)}")
        if self.split not in ("train", "eval"):
            raise BadSpec(f"split must be 'train' or 'eval', got {self.split!r}")
        object.__setattr__(self, "views", views)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, i) -> CameraView:
        return self.views[i]

    @property
    def hw(self):
        return self.views[0].hw

    @property
    def has_masks(self) -> bool:
        return all(v.mask is not None for v in self.views)

    def occupancies(self) -> list:
        return [v.occupancy for v in self.views]

    def centers(self) -> np.ndarray:
        return np.stack([v.center for v in self.views])

    def subset(self, indices: Sequence[int]) -> "SceneDataset":
        return replace(self, views=tuple(self.views[i] for i in indices))

    def without_masks(self) -> "SceneDataset":
        return replace(self, views=tuple(v.with_mask(None) for v in self.views))

    def with_zero_masks(self) -> "SceneDataset":
        h, w = self.hw
        zero = OccupancyMask.zeros(h, w)
        return replace(self, views=tuple(v.with_mask(zero) for v in self.views))


def read_image(path) -> np.ndarray:
    if not os.path.exists(path):
        raise MissingFile(f"image not found: {path}")
    with Image.open(path) as im:
        return decode_8bit(np.asarray(im.convert("RGB")))


def read_mask(path) -> OccupancyMask:
    if not os.path.exists(path):
        raise MissingFile(f"mask not found: {path}")
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return OccupancyMask((data >= MASK_THRESHOLD).astype(np.uint8))


def write_image(path, image) -> str:
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(image).all():
        raise ValueError("image contains non-finite values")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(encode_8bit(image)).save(path)
    return str(path)


def write_mask(path, mask) -> str:
    bits = mask.bits if isinstance(mask, OccupancyMask) else np.asarray(mask)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray((bits > 0).astype(np.uint8) * 255, mode="L").save(path)
    return str(path)


def save_rendered(view_id: str, image, out_dir) -> str:
    """Writes ``image`` (linear RGB) as ``out_dir/<view_id>.png`` and returns the path."""
    return write_image(os.path.join(out_dir, f"{view_id}.png"), image)


def load_scene(root, split: str = "train", scene_id: Optional[str] = None) -> SceneDataset:
    root = os.fspath(root)
    cam_path = os.path.join(root, "cameras.json")
    if not os.path.exists(cam_path):
        raise MissingFile(f"cameras file not found: {cam_path}")
    with open(cam_path) as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise BadSpec(f"{cam_path}: {e}") from None
    try:
        h, w = int(meta["h"]), int(meta["w"])
        near, far = float(meta["near"]), float(meta["far"])
        entries = meta["views"]
    except (KeyError, TypeError, ValueError) as e:
        raise BadSpec(f"{cam_path}: missing or malformed field ({e})") from None
    if not near < far:
        raise BadBounds(f"{cam_path}: near ({near}) must be < far ({far})")

    views = []
    for i, entry in enumerate(entries):
        name = os.path.splitext(os.path.basename(entry["file"]))[0]
        image = read_image(os.path.join(root, entry["file"]))
        if image.shape[:2] != (h, w):
            raise ShapeMismatch(f"view {name}: image is {image.shape[:2]}, cameras.json says {(h, w)}")
        mask = None
        if entry.get("mask"):
            mask = read_mask(os.path.join(root, entry["mask"]))
            if mask.shape != (h, w):
                raise ShapeMismatch(f"view {name}: mask shape {mask.shape} != image shape {(h, w)}")
        K = np.asarray(entry["K"], dtype=np.float64)
        c2w = np.asarray(entry["c2w"], dtype=np.float64)
        if K.size != 9 or c2w.size != 12:
            raise BadSpec(f"view {name}: K needs 9 values and c2w 12")
        try:
            check_rotation(c2w.reshape(3, 4))
        except BadPose as e:
            raise BadPose(f"view {name}: {e}") from None
        views.append(CameraView(image, K.reshape(3, 3), c2w.reshape(3, 4), near, far, mask, name=name))
    if scene_id is None:
        scene_id = os.path.basename(os.path.normpath(root))
    return SceneDataset(tuple(views), scene_id=scene_id, split=split)


def save_scene(scene: SceneDataset, root, with_masks: bool = True) -> str:
    """Writes ``scene`` in the directory layout read by :func:`load_scene`."""
    root = os.fspath(root)
    h, w = scene.hw
    entries = []
    for i, v in enumerate(scene.views):
        stem = f"{i:03d}"
        rel = f"images/{stem}.png"
        write_image(os.path.join(root, rel), v.image)
        mask_rel = None
        if with_masks and v.mask is not None:
            mask_rel = f"masks/{stem}.png"
            write_mask(os.path.join(root, mask_rel), v.mask)
        entries.append({
            "file": rel,
            "mask": mask_rel,
            "K": [float(x) for x in v.intrinsics.ravel()],
            "c2w": [float(x) for x in v.pose_c2w.ravel()],
        })
    near = min(v.near for v in scene.views)
    far = max(v.far for v in scene.views)
    meta = {"h": h, "w": w, "near": near, "far": far, "views": entries}
    with open(os.path.join(root, "cameras.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return root
