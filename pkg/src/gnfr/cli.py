"""``gnfr`` command-line tool.

Exit codes: 0 success, 2 validation failure, 3 degenerate data.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

from .errors import DegenerateData, GnfrError, ValidationError

EXIT_VALIDATION = 2
EXIT_DEGENERATE = 3


def _indices(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=1, default=float))


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Flare-robust generalizable radiance-field rendering at desk scale."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# -- synthesis ---------------------------------------------------------------------

@cli.group()
def synth():
    """Synthetic data: flare corpora, toy scenes, textures and patterns."""


@synth.command("corpus")
@click.option("--images", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--patterns", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--n", "n_out", required=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--size", default=None, type=click.IntRange(min=8), help="Resize base images to SIZE x SIZE.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth_corpus(images, patterns, n_out, seed, size, out):
    """(flare, clean, mask) triples from base images and flare patterns."""
    from .flare_synth import build_flare_corpus
    click.echo(build_flare_corpus(images, patterns, n_out, seed, out, size=size))


@synth.command("scene")
@click.option("--preset", type=click.Choice(["plane", "box"]), default="plane", show_default=True)
@click.option("--views", default=12, show_default=True, type=click.IntRange(min=3))
@click.option("--res", default=64, show_default=True, type=click.IntRange(min=8))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--flare", default=None, type=click.Path(exists=True, file_okay=False),
              help="Pattern directory; composites one random flare per view.")
@click.option("--clean-out", default=None, type=click.Path(file_okay=False),
              help="Where to write the flare-free ground truth (default: OUT_clean) when --flare is set.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth_scene(preset, views, res, seed, flare, clean_out, out):
    """Toy multi-view scene with analytic geometry."""
    from .flare_synth import ToySceneConfig, apply_flare, generate_toy_scene, load_patterns
    from .scene_io import save_scene
    cfg = ToySceneConfig(preset=preset, n_views=views, resolution=res)
    clean = generate_toy_scene(cfg, seed, scene_id=os.path.basename(os.path.normpath(out)))
    if flare is None:
        click.echo(save_scene(clean.with_zero_masks(), out))
        return
    flared = apply_flare(clean, load_patterns(flare), seed)
    save_scene(flared, out)
    clean_out = clean_out or os.path.normpath(out) + "_clean"
    save_scene(clean.with_zero_masks(), clean_out)
    click.echo(out)
    click.echo(clean_out)


@synth.command("textures")
@click.option("--n", "n_out", required=True, type=click.IntRange(min=1))
@click.option("--res", default=128, show_default=True, type=click.IntRange(min=8))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth_textures(n_out, res, seed, out):
    """Procedural base images (stand-in for a photo collection)."""
    from .flare_synth import procedural_texture
    from .scene_io import write_image
    for i in range(n_out):
        write_image(os.path.join(out, f"{i:05d}.png"), procedural_texture(res, seed * 1_000_003 + i))
    click.echo(out)


@synth.command("patterns")
@click.option("--n", "n_out", required=True, type=click.IntRange(min=1))
@click.option("--res", default=128, show_default=True, type=click.IntRange(min=8))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def synth_patterns(n_out, res, seed, out):
    """Procedural flare patterns with annotation masks (out/images, out/masks)."""
    from .flare_synth import procedural_flare_pattern, write_pattern
    for i in range(n_out):
        write_pattern(procedural_flare_pattern(res, seed * 1_000_003 + i), out, f"{i:05d}")
    click.echo(out)


# -- mask generator ------------------------------------------------------------------

@cli.command("train-fmg")
@click.option("--corpus", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--iters", default=2000, show_default=True, type=click.IntRange(min=1))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--cfg", "cfg_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="JSON mask-generator config.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_fmg_cmd(corpus, iters, seed, cfg_path, out):
    """Train the flare mask generator on a synthetic corpus."""
    from .fmg import SegModelConfig, train_fmg
    cfg = SegModelConfig.from_dict(_read_json(cfg_path))
    ckpt = train_fmg(corpus, cfg, iters=iters, seed=seed, out_path=out)
    _echo_json(ckpt.metrics.to_dict())


@cli.command("infer-mask")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def infer_mask_cmd(ckpt, image, out):
    """Predict a binary flare mask for one image."""
    from .fmg import infer_mask, load_fmg
    from .scene_io import read_image, write_mask
    mask = infer_mask(load_fmg(ckpt), read_image(image))
    write_mask(out, mask)
    click.echo(f"{out} occupancy={mask.occupancy:.4f}")


# -- view sampler --------------------------------------------------------------------

@cli.command("dict")
@click.option("--scenes", required=True, multiple=True, type=click.Path(exists=True, file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--k-range", nargs=2, type=float, default=None, help="Pool multiplier range (default 1 2).")
@click.option("--n-range", nargs=2, type=int, default=None, help="Source count range (default 3 6).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def dict_cmd(scenes, seed, k_range, n_range, out):
    """Training dictionary of (target, sources, k, N) entries."""
    from .sampling import DESK_K_RANGE, DESK_N_RANGE, build_dictionary, save_dictionary
    from .scene_io import load_scene
    loaded = [load_scene(s) for s in scenes]
    entries = build_dictionary(loaded, seed, k_range or DESK_K_RANGE, n_range or DESK_N_RANGE)
    click.echo(save_dictionary(entries, out))


# -- renderer training -----------------------------------------------------------------

@cli.command("train")
@click.option("--scenes", required=True, multiple=True, type=click.Path(exists=True, file_okay=False))
@click.option("--rcfg", default=None, type=click.Path(exists=True, dir_okay=False), help="Renderer config JSON.")
@click.option("--tcfg", default=None, type=click.Path(exists=True, dir_okay=False), help="Training config JSON.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def train_cmd(scenes, rcfg, tcfg, out):
    """Train a renderer; GNFR_SEED overrides the configured seed."""
    from .renderer import RendererConfig
    from .scene_io import load_scene
    from .training import TrainConfig, train
    rc = RendererConfig.from_dict(_read_json(rcfg))
    tc = TrainConfig.from_dict(_read_json(tcfg))
    if "GNFR_SEED" in os.environ:
        tc.seed = int(os.environ["GNFR_SEED"])
    loaded = [load_scene(s) for s in scenes]
    ckpt = train(loaded, rc, tc, out_path=out)
    _echo_json({"out": out, "step": ckpt.step, **ckpt.metrics})


@cli.command("finetune")
@click.option("--base", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--iters", required=True, type=click.IntRange(min=0))
@click.option("--heldout", default="", help="Comma-separated view indices excluded from fine-tuning.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def finetune_cmd(base, scene, iters, heldout, out):
    """Continue training a checkpoint on one scene."""
    import copy

    from .scene_io import load_scene
    from .training import finetune, load_checkpoint
    ck = load_checkpoint(base)
    sc = load_scene(scene)
    held = set(_indices(heldout))
    if held:
        sc = sc.subset([i for i in range(len(sc)) if i not in held])
    tc = copy.deepcopy(ck.train_config)
    tc.iters = iters
    tc.finetune_from = None
    if "GNFR_SEED" in os.environ:
        tc.seed = int(os.environ["GNFR_SEED"])
    out_ck = finetune(ck, sc, tc, out_path=out)
    _echo_json({"out": out, "step": out_ck.step})


# -- rendering and evaluation -------------------------------------------------------------

def _target_pose(spec: str, scene):
    """An integer view index, a JSON file, or an inline JSON object with K, c2w and optional h, w."""
    if spec.strip().lstrip("-").isdigit():
        i = int(spec)
        if not 0 <= i < len(scene):
            raise click.BadParameter(f"view index {i} out of range for {len(scene)} views")
        v = scene[i]
        return v.intrinsics, v.pose_c2w, v.hw, [i]
    if os.path.exists(spec):
        with open(spec) as f:
            d = json.load(f)
    else:
        try:
            d = json.loads(spec)
        except json.JSONDecodeError:
            raise click.BadParameter("target pose must be a view index, a JSON file or inline JSON") from None
    from .scene_io import check_rotation
    K = np.asarray(d["K"], dtype=np.float64).reshape(3, 3)
    c2w = np.asarray(d["c2w"], dtype=np.float64).reshape(3, 4)
    check_rotation(c2w)
    hw = (int(d.get("h", scene.hw[0])), int(d.get("w", scene.hw[1])))
    return K, c2w, hw, []


@cli.command("render")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--target-pose", required=True,
              help="View index (rendered from the other views) or JSON {K, c2w[, h, w]}.")
@click.option("--mask-mode", default="annotated", show_default=True,
              help="annotated | fmg:CKPT | none")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def render_cmd(ckpt, scene, target_pose, mask_mode, out):
    """Render one novel view."""
    from .evaluation import render_view, resolve_masks
    from .scene_io import load_scene, write_image
    from .training import load_checkpoint
    ck = load_checkpoint(ckpt)
    sc = load_scene(scene)
    K, c2w, hw, exclude = _target_pose(target_pose, sc)
    sc = resolve_masks(sc, mask_mode)
    image, sel = render_view(ck, sc, K, c2w, hw, exclude=exclude, use_masks=mask_mode != "none")
    write_image(out, image)
    _echo_json({"out": out, "sources": list(sel.source_indices)})


@cli.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--clean", default=None, type=click.Path(exists=True, file_okay=False))
@click.option("--heldout", required=True, help="Comma-separated view indices.")
@click.option("--mask-mode", default=None, help="annotated | fmg:CKPT | none (default: as trained)")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def eval_cmd(ckpt, scene, clean, heldout, mask_mode, out):
    """Render held-out views and score them against clean ground truth."""
    from .evaluation import evaluate
    from .scene_io import load_scene
    from .training import load_checkpoint
    report = evaluate(load_checkpoint(ckpt), load_scene(scene, split="eval"),
                      load_scene(clean, split="eval") if clean else None,
                      _indices(heldout), out, mask_mode)
    _echo_json({k: getattr(report, k) for k in ("psnr", "ssim", "psnr_flare_region", "n_views")})


@cli.command("ablate")
@click.option("--a", "ckpt_a", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--b", "ckpt_b", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scene", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--clean", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--heldout", required=True, help="Comma-separated view indices.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def ablate_cmd(ckpt_a, ckpt_b, scene, clean, heldout, out):
    """Masked-vs-vanilla comparison table and difference heatmaps."""
    from .evaluation import ablation_compare
    from .scene_io import load_scene
    from .training import load_checkpoint
    res = ablation_compare(load_checkpoint(ckpt_a), load_checkpoint(ckpt_b),
                           load_scene(scene, split="eval"), load_scene(clean, split="eval"),
                           _indices(heldout), out)
    click.echo(res["table"], nl=False)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="gnfr", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return EXIT_VALIDATION
    except DegenerateData as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_DEGENERATE
    except (ValidationError, FileNotFoundError) as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return EXIT_VALIDATION
    except GnfrError as e:
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
