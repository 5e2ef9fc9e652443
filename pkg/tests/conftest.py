import numpy as np
import pytest
import torch

from gnfr.flare_synth import ToySceneConfig, apply_flare, generate_toy_scene, procedural_flare_pattern
from gnfr.geometry import intrinsics, look_at
from gnfr.scene_io import CameraView, OccupancyMask, SceneDataset


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def plane_scene():
    return generate_toy_scene(ToySceneConfig("plane", n_views=8, resolution=32, supersample=1), 0)


@pytest.fixture(scope="session")
def box_scene():
    return generate_toy_scene(ToySceneConfig("box", n_views=8, resolution=32, supersample=1), 1)


@pytest.fixture(scope="session")
def patterns():
    return [procedural_flare_pattern(32, i) for i in range(4)]


@pytest.fixture(scope="session")
def flared_scene(plane_scene, patterns):
    return apply_flare(plane_scene, patterns, 5)


def make_view(h=8, w=8, eye=(0.0, 0.0, -3.0), mask=None, value=0.5, near=1.0, far=5.0):
    K = intrinsics(w, h, w / 2, h / 2)
    c2w = look_at(eye, (0.0, 0.0, 0.0))
    img = np.full((h, w, 3), value)
    m = None if mask is None else OccupancyMask(np.asarray(mask, dtype=np.uint8))
    return CameraView(img, K, c2w, near, far, m)


def line_scene(occupancies, positions=None, h=10, w=10):
    """Cameras on the x axis with masks of the given occupancies."""
    views = []
    for i, occ in enumerate(occupancies):
        n = int(round(occ * h * w))
        bits = np.zeros(h * w, np.uint8)
        bits[:n] = 1
        x = float(i if positions is None else positions[i])
        views.append(make_view(h, w, eye=(x, 0.0, -3.0), mask=bits.reshape(h, w)))
    return SceneDataset(tuple(views), scene_id="line")


# -- heavy desk-scale runs shared by the acceptance suite and a few module tests ----------------

HEADLINE_SCENES = [("plane", 0), ("box", 1), ("plane", 2)]
HEADLINE_HELDOUT = [3, 8]

ACCEPTANCE_LINES = {}


def record(criterion: int, ok: bool, detail: str):
    """Stores the one-line verdict shown in the terminal summary, then asserts it."""
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, ACCEPTANCE_LINES[criterion]


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
               if "test_acceptance.py" in getattr(r, "nodeid", "")]
    for r in reports:
        parts = r.nodeid.split("::")[-1].split("_")
        if not r.passed and len(parts) > 2 and parts[1].isdigit():
            n = int(parts[1])
            ACCEPTANCE_LINES.setdefault(n, f"criterion {n}: FAIL  errored before reaching its check")
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def fmg_runs(tmp_path_factory):
    """1000-triple 128x128 corpus; 2000-iteration mask generators with 5:1 and 1:1 class weights."""
    import time

    from gnfr import flare_synth as fs
    from gnfr import fmg
    from gnfr.scene_io import write_image

    root = tmp_path_factory.mktemp("fmg_runs")
    for i in range(100):
        write_image(root / "tex" / f"{i:03d}.png", fs.procedural_texture(128, i))
    for i in range(40):
        fs.write_pattern(fs.procedural_flare_pattern(128, i), root / "pat", f"p{i:03d}")
    corpus = fs.build_flare_corpus(root / "tex", root / "pat", 1000, 0, root / "corpus")
    out = {"corpus": corpus}
    for name, w in (("weighted", (5.0, 1.0)), ("balanced", (1.0, 1.0))):
        t = time.time()
        out[name] = fmg.train_fmg(corpus, fmg.SegModelConfig(class_weights=w), iters=2000, seed=0)
        out[name + "_seconds"] = time.time() - t
    return out


@pytest.fixture(scope="session")
def headline_runs():
    """Three flared toy scenes; masked (sampler + point masking + masked loss) vs vanilla training."""
    import time

    from gnfr.renderer import RendererConfig
    from gnfr.training import TrainConfig, train

    patterns = [procedural_flare_pattern(64, i) for i in range(16)]
    clean, flared = [], []
    for j, (preset, seed) in enumerate(HEADLINE_SCENES):
        c = generate_toy_scene(ToySceneConfig(preset, n_views=12), seed, f"s{j}")
        clean.append(c)
        flared.append(apply_flare(c, patterns, 100 + j))
    train_sets = [f.subset([i for i in range(len(f)) if i not in HEADLINE_HELDOUT]) for f in flared]
    t = time.time()
    masked = train(train_sets, RendererConfig(), TrainConfig(iters=2000, mask_mode="annotated", seed=0))
    vanilla = train(train_sets, RendererConfig(), TrainConfig(iters=2000, mask_mode="none", seed=0))
    return {"clean": clean, "flared": flared, "masked": masked, "vanilla": vanilla,
            "seconds": time.time() - t}


@pytest.fixture(scope="session")
def overfit_run():
    """One flare-free 64x64 toy scene, 2000 iterations, two views held out."""
    import time

    from gnfr.renderer import RendererConfig
    from gnfr.training import TrainConfig, train

    scene = generate_toy_scene(ToySceneConfig("plane", n_views=12, resolution=64), 0).with_zero_masks()
    held = [3, 8]
    t = time.time()
    ck = train([scene.subset([i for i in range(len(scene)) if i not in held])], RendererConfig(),
               TrainConfig(iters=2000, mask_mode="none", seed=0))
    return {"scene": scene, "heldout": held, "ckpt": ck, "seconds": time.time() - t}
