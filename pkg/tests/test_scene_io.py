import json
import os

import numpy as np
import pytest
from PIL import Image

from gnfr.errors import BadBounds, BadPose, BadSpec, MissingFile, ShapeMismatch
from gnfr.scene_io import (CameraView, OccupancyMask, SceneDataset, decode_8bit, encode_8bit,
                           linear_to_srgb, load_scene, read_image, read_mask, save_rendered,
                           save_scene, srgb_to_linear, write_mask)

from conftest import make_view


def test_srgb_transfer_inverts():
    x = np.linspace(0, 1, 1001)
    np.testing.assert_allclose(srgb_to_linear(linear_to_srgb(x)), x, atol=1e-12)


def test_linear_half_encodes_to_188(tmp_path):
    p = save_rendered("half", np.full((2, 2, 3), 0.5), tmp_path)
    assert p == os.path.join(tmp_path, "half.png")
    assert np.all(np.asarray(Image.open(p)) == 188)


@pytest.mark.parametrize("value,byte", [(0.0, 0), (1.0, 255), (-3.0, 0), (7.0, 255)])
def test_save_rendered_extremes_and_clipping(tmp_path, value, byte):
    p = save_rendered("v", np.full((3, 4, 3), value), tmp_path)
    data = np.asarray(Image.open(p))
    assert data.shape == (3, 4, 3) and np.all(data == byte)


def test_save_rendered_rejects_nonfinite(tmp_path):
    img = np.zeros((2, 2, 3))
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        save_rendered("bad", img, tmp_path)


def test_image_round_trip_within_one_code(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (16, 16, 3))
    p = save_rendered("rt", img, tmp_path)
    back = read_image(p)
    # quantization bound holds in the stored (encoded) domain
    assert np.abs(linear_to_srgb(back) - linear_to_srgb(img)).max() <= 0.5 / 255 + 1e-12
    assert np.array_equal(encode_8bit(back), encode_8bit(img))


def test_decode_encode_bytes_identity():
    codes = np.arange(256, dtype=np.uint8)
    assert np.array_equal(encode_8bit(decode_8bit(codes)), codes)


def test_mask_threshold_and_occupancy(tmp_path):
    data = np.array([[0, 127], [128, 255]], np.uint8)
    Image.fromarray(data, mode="L").save(tmp_path / "m.png")
    m = read_mask(tmp_path / "m.png")
    assert m.bits.tolist() == [[0, 0], [1, 1]]
    assert m.occupancy == 0.5


def test_occupancy_exact_after_load(tmp_path):
    rng = np.random.default_rng(1)
    bits = (rng.uniform(size=(13, 7)) < 0.3).astype(np.uint8)
    write_mask(tmp_path / "m.png", OccupancyMask(bits))
    m = read_mask(tmp_path / "m.png")
    assert m.occupancy == np.count_nonzero(bits) / bits.size
    assert m.occupancy == float(np.mean(m.bits))


def test_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        OccupancyMask(np.array([[0, 2]]))


def test_camera_view_invariants():
    v = make_view()
    assert v.hw == (8, 8)
    with pytest.raises(BadBounds):
        make_view(near=2.0, far=2.0)
    with pytest.raises(ShapeMismatch):
        make_view(mask=np.zeros((4, 4)))
    K = np.array(v.intrinsics)
    K[0, 2] = 8.0  # cx must be < W
    with pytest.raises(BadSpec):
        CameraView(v.image, K, v.pose_c2w, 1.0, 2.0)


def test_scaled_rotation_is_bad_pose():
    pose = np.concatenate([1.1 * np.eye(3), np.zeros((3, 1))], 1)
    R = pose[:, :3]
    assert np.isclose(np.abs(R.T @ R - np.eye(3)).max(), 0.21)
    with pytest.raises(BadPose):
        CameraView(np.zeros((4, 4, 3)), np.diag([1.0, 1.0, 1.0]), pose, 1.0, 2.0)


def test_views_are_immutable():
    v = make_view()
    with pytest.raises(ValueError):
        v.image[0, 0, 0] = 1.0


def test_scene_needs_three_views_and_one_size():
    v = make_view()
    with pytest.raises(BadSpec):
        SceneDataset((v, v))
    with pytest.raises(ShapeMismatch):
        SceneDataset((v, v, make_view(h=6)))


def _write_scene(tmp_path, n=5, masks=True):
    views = [make_view(value=0.1 * (i + 1), eye=(float(i), 0.0, -3.0),
                       mask=np.eye(8, dtype=np.uint8) if masks else None) for i in range(n)]
    return save_scene(SceneDataset(tuple(views), "s"), tmp_path / "scene")


def test_load_valid_scene(tmp_path):
    root = _write_scene(tmp_path)
    s = load_scene(root)
    assert len(s) == 5 and s.split == "train" and s.scene_id == "scene"
    assert s.has_masks and s[0].occupancy == 8 / 64
    np.testing.assert_allclose(s[2].pose_c2w[:, 3], [2.0, 0.0, -3.0])
    meta = json.load(open(os.path.join(root, "cameras.json")))
    assert set(meta) == {"h", "w", "near", "far", "views"}
    assert set(meta["views"][0]) == {"file", "mask", "K", "c2w"}
    assert len(meta["views"][0]["K"]) == 9 and len(meta["views"][0]["c2w"]) == 12


def test_load_is_deterministic(tmp_path):
    root = _write_scene(tmp_path)
    a, b = load_scene(root), load_scene(root)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.mask.bits, vb.mask.bits)


def test_load_missing_image(tmp_path):
    root = _write_scene(tmp_path)
    os.remove(os.path.join(root, "images", "002.png"))
    with pytest.raises(MissingFile):
        load_scene(root)


def test_load_wrong_mask_size_names_view(tmp_path):
    root = _write_scene(tmp_path)
    write_mask(os.path.join(root, "masks", "003.png"), np.zeros((4, 4), np.uint8))
    with pytest.raises(ShapeMismatch, match="003"):
        load_scene(root)


def test_load_bad_pose_and_bounds(tmp_path):
    root = _write_scene(tmp_path)
    path = os.path.join(root, "cameras.json")
    meta = json.load(open(path))
    good = json.dumps(meta)
    meta["views"][1]["c2w"] = [1.1, 0, 0, 0, 0, 1.1, 0, 0, 0, 0, 1.1, 0]
    json.dump(meta, open(path, "w"))
    with pytest.raises(BadPose):
        load_scene(root)
    meta = json.loads(good)
    meta["near"] = meta["far"]
    json.dump(meta, open(path, "w"))
    with pytest.raises(BadBounds):
        load_scene(root)


def test_null_masks_load_as_none(tmp_path):
    s = load_scene(_write_scene(tmp_path, masks=False))
    assert not s.has_masks and s.occupancies() == [None] * 5
