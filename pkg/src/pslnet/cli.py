"""Command-line surface: dataset-build, train, eval, infer, degrade, summary.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 training divergence.
Every command writes a run_manifest.json next to its primary output recording
the resolved configuration, seeds, and input/output digests. PSLNET_SEED in
the environment is the fallback when --seed is not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, degrade, metrics, train as train_mod
from .model import (ModelConfig, PAPER_CONFIG, TOY_CONFIG, load_checkpoint,
                    restore_image, summarize)
from .train import DivergenceError, TrainConfig, preset_config


def _default_seed(value) -> int:
    if value is not None:
        return int(value)
    return int(os.environ.get("PSLNET_SEED", "0"))


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _write_run_manifest(out_dir, command, config: dict, seed: int,
                        inputs: dict, outputs: dict, started: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = lambda p: degrade.sha256_file(p) if Path(p).is_file() else None
    payload = {
        "command": command,
        "config": config,
        "seeds": {"seed": seed},
        "inputs": {str(k): digest(v) for k, v in inputs.items()},
        "outputs": {str(k): digest(v) for k, v in outputs.items()},
        "tool_version": __version__,
        "wall_clock_sec": time.monotonic() - started,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=1),
                                               encoding="utf-8")


# ---------------------------------------------------------------------------
# dataset-build

def cmd_dataset_build(args) -> int:
    started = time.monotonic()
    seed = _default_seed(args.seed)
    out = Path(args.out)
    clean_dir, wm_dir = args.clean_dir, args.wm_dir
    if args.synthetic:
        images, marks = degrade.generate_test_assets(
            args.synthetic, args.synthetic_watermarks, seed,
            image_size=args.synthetic_size)
        clean_dir = out / "clean"
        wm_dir = out / "watermarks"
        clean_dir.mkdir(parents=True, exist_ok=True)
        wm_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            degrade.save_image(clean_dir / f"clean{i:04d}.png", img)
        for wm in marks:
            degrade.save_watermark(wm_dir / f"{wm.wm_id}.png", wm)
    elif not clean_dir or not wm_dir:
        print("error: provide --clean-dir and --wm-dir, or --synthetic N",
              file=sys.stderr)
        return 2

    config = degrade.CorpusConfig(
        patch_size=args.patch_size, stride=args.stride,
        sigma_set=tuple(args.sigmas),
        transparencies=tuple(args.alphas) if args.alphas else (0.3, 0.5, 0.7, 1.0),
        blind_transparency=args.alpha_blind,
        scale_range=(args.scale_min, args.scale_max),
        coverage_max=args.coverage_max, seed=seed)
    manifest = degrade.build_corpus(clean_dir, wm_dir, config, out)
    print(f"wrote {len(manifest.entries)} samples to {out} "
          f"(manifest digest {config.digest()[:12]})")
    _write_run_manifest(out, "dataset-build", config.to_dict(), seed,
                        inputs={}, outputs={"manifest": out / "manifest.json"},
                        started=started)
    return 0


# ---------------------------------------------------------------------------
# train

def _train_config_from_args(args) -> TrainConfig:
    seed = _default_seed(args.seed)
    if args.preset:
        cfg = preset_config(args.preset, seed=seed)
    else:
        cfg = TrainConfig(seed=seed)
    overrides = {}
    for name in ("batch_size", "epochs", "lr0", "decay_every", "decay_factor",
                 "lam", "losstype", "max_steps", "checkpoint_every", "log_every",
                 "num_threads", "pn_weights"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.no_interactions:
        overrides["interactions_on"] = False
    if args.no_em:
        overrides["em_on"] = False
    if args.no_texture_loss:
        overrides["texture_loss_on"] = False
    if args.base_channels is not None or args.depth is not None:
        overrides["model"] = ModelConfig(
            base_channels=args.base_channels or cfg.model.base_channels,
            depth=args.depth or cfg.model.depth,
            interaction_hidden=cfg.model.interaction_hidden,
            leaky_slope=cfg.model.leaky_slope)
    return replace(cfg, **overrides) if overrides else cfg


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = _train_config_from_args(args)
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    manifest = degrade.CorpusManifest.load(args.data)
    final = train_mod.fit(manifest, cfg, args.out, resume=args.resume)
    print(f"training complete: {final}")
    _write_run_manifest(args.out, "train", cfg.to_dict(), cfg.seed,
                        inputs={"manifest": args.data},
                        outputs={"checkpoint": final}, started=started)
    return 0


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    started = time.monotonic()
    manifest = degrade.CorpusManifest.load(args.data)
    report = metrics.evaluate_corpus(
        args.checkpoint, manifest, sigma=args.sigma, alpha=args.alpha,
        limit=args.limit, manifest_path=args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = report.save(out / "report.json")
    for cell in report.cells:
        print(f"sigma={cell.sigma:g} alpha={cell.alpha:g} n={cell.n} "
              f"psnr={cell.psnr_mean:.4f} rmse={cell.rmse_mean:.4f} "
              f"ssim={cell.ssim_mean:.4f} (input psnr {cell.psnr_input_mean:.4f})")
    if args.grids:
        _save_grids(args.checkpoint, manifest, out, args.grids)
    _write_run_manifest(out, "eval",
                        {"checkpoint": str(args.checkpoint), "data": str(args.data),
                         "sigma": args.sigma, "alpha": args.alpha,
                         "limit": args.limit},
                        _default_seed(None),
                        inputs={"checkpoint": args.checkpoint, "manifest": args.data},
                        outputs={"report": report_path}, started=started)
    return 0


def _save_grids(checkpoint, manifest, out: Path, n: int) -> None:
    net, _, _ = load_checkpoint(checkpoint)
    net.eval()
    for i, entry in enumerate(manifest.entries[:n]):
        clean = degrade.load_image(manifest.resolve(entry.clean))
        inp = degrade.load_image(manifest.resolve(entry.input))
        restored = np.clip(restore_image(net, inp), 0.0, 1.0)
        grid = np.concatenate([clean, np.clip(inp, 0.0, 1.0), restored], axis=1)
        degrade.save_image(out / f"grid{i:03d}.png", grid)


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    started = time.monotonic()
    net, _, _ = load_checkpoint(args.checkpoint)
    net.eval()
    img = degrade.load_image(args.image)
    restored = restore_image(net, img, which=args.output_branch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    degrade.save_image(out, restored)
    print(f"restored image written to {out}")
    _write_run_manifest(out.parent, "infer",
                        {"checkpoint": str(args.checkpoint),
                         "image": str(args.image),
                         "output_branch": args.output_branch},
                        _default_seed(None),
                        inputs={"checkpoint": args.checkpoint, "image": args.image},
                        outputs={"restored": out}, started=started)
    return 0


# ---------------------------------------------------------------------------
# degrade (single image, for inspection and quick baselines)

def cmd_degrade(args) -> int:
    started = time.monotonic()
    seed = _default_seed(args.seed)
    clean = degrade.load_image(args.image)
    if args.wm:
        wm = degrade.load_watermark(args.wm)
        params = degrade.DegradationParams(
            wm_id=wm.wm_id, transparency=args.alpha, scale=args.scale,
            position=tuple(args.position) if args.position else (0, 0),
            sigma=args.sigma, coverage_max=args.coverage_max, seed=seed)
        if args.position is None:
            rgb_s, alpha_s = degrade.scaled_watermark(wm, args.scale)
            rng = degrade.derive_rng(seed, "degrade-cmd")
            h, w = alpha_s.shape
            H, W = clean.shape[:2]
            params = replace(params, position=(
                int(rng.integers(0, max(H - h, 0) + 1)),
                int(rng.integers(0, max(W - w, 0) + 1))))
        out_img = degrade.blend_watermark(clean, wm, params)
    else:
        out_img = clean
    out_img = degrade.add_gaussian_noise(out_img, args.sigma,
                                         degrade.derive_seed(seed, "noise"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    degrade.save_image(out, out_img)
    print(f"degraded image written to {out}")
    _write_run_manifest(out.parent, "degrade",
                        {"image": str(args.image), "wm": args.wm,
                         "alpha": args.alpha, "scale": args.scale,
                         "sigma": args.sigma},
                        seed, inputs={"image": args.image},
                        outputs={"degraded": out}, started=started)
    return 0


# ---------------------------------------------------------------------------
# summary

def cmd_summary(args) -> int:
    config = {"toy": TOY_CONFIG, "paper": PAPER_CONFIG}[args.preset]
    if args.base_channels is not None or args.depth is not None:
        config = ModelConfig(base_channels=args.base_channels or config.base_channels,
                             depth=args.depth or config.depth)
    summary = summarize(config)
    flops = summary.flops_at(args.height, args.width)
    print(f"preset:     {args.preset}")
    print(f"widths:     {list(config.encoder_widths())}")
    print(f"parameters: {summary.parameter_count} ({summary.parameter_count / 1e6:.3f}M)")
    print(f"flops@{args.height}x{args.width}: {flops} ({flops / 1e9:.3f}G)")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pslnet",
        description="Self-supervised noisy-image watermark removal pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-build", help="synthesize a training corpus")
    p.add_argument("--clean-dir", help="directory of clean PNG/JPG images")
    p.add_argument("--wm-dir", help="directory of RGBA watermark PNGs")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--sigmas", type=_float_list, default=[0.0, 25.0, 50.0],
                   help="comma-separated noise levels on the 0-255 scale")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--alphas", type=_float_list,
                       help="comma-separated transparency values")
    group.add_argument("--alpha-blind", action="store_true",
                       help="draw transparency uniformly from [0.3, 1.0]")
    p.add_argument("--coverage-max", type=float, default=0.4)
    p.add_argument("--scale-min", type=float, default=0.5)
    p.add_argument("--scale-max", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="generate N procedural clean images instead of reading --clean-dir")
    p.add_argument("--synthetic-watermarks", type=int, default=6)
    p.add_argument("--synthetic-size", type=int, default=96)
    p.set_defaults(func=cmd_dataset_build)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--data", required=True, help="corpus manifest.json")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--preset", choices=sorted(train_mod.PRESETS))
    p.add_argument("--config", help="JSON file with a full TrainConfig")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--decay-every", type=int, dest="decay_every")
    p.add_argument("--decay-factor", type=float, dest="decay_factor")
    p.add_argument("--lambda", type=float, dest="lam",
                   help="texture loss weight")
    p.add_argument("--losstype", choices=("l1", "l2"))
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--log-every", type=int, dest="log_every")
    p.add_argument("--num-threads", type=int, dest="num_threads")
    p.add_argument("--pn-weights", dest="pn_weights",
                   help="perception weight container (default: seeded init)")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--depth", type=int)
    p.add_argument("--no-interactions", action="store_true",
                   help="ablation: clamp both channel gates to 1")
    p.add_argument("--no-em", action="store_true",
                   help="ablation: fused output = lower branch output")
    p.add_argument("--no-texture-loss", action="store_true",
                   help="ablation: structural loss only (lambda = 0)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="corpus manifest.json")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--sigma", type=_float_list, default=None,
                   help="only evaluate entries with these noise levels")
    p.add_argument("--alpha", type=_float_list, default=None,
                   help="only evaluate entries with these transparencies")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--grids", type=int, default=0,
                   help="save N clean|degraded|restored comparison strips")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--output-branch", choices=("fused", "upper", "lower"),
                   default="fused", dest="output_branch")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("degrade", help="watermark and noise a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--wm", help="watermark PNG (omit for noise only)")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--position", type=int, nargs=2, default=None,
                   metavar=("ROW", "COL"))
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--coverage-max", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("summary", help="parameter and FLOP accounting")
    p.add_argument("--preset", choices=("toy", "paper"), default="paper")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--depth", type=int)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(func=cmd_summary)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if exc.dump_path:
            print(f"diagnostics: {exc.dump_path}", file=sys.stderr)
        return 3
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
