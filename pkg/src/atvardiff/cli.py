"""Command line entry point: ``atvardiff {simulate,train,restore,eval,gradcheck}``.

Config precedence is flags > ``--config`` file > ``--profile`` > built-in
defaults. Every run logs its fully resolved config. ``ATVD_LOG`` selects the
log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import get_type_hints

from . import data, gradcheck, metrics
from .checkpoint import CheckpointError
from .config import PROFILES, ConfigError, EvalConfig, RestoreConfig, SimulateConfig, TrainConfig, dump, resolve
from .inference import Restorer
from .tensor import NonFiniteError, ShapeError
from .training import train

log = logging.getLogger("atvardiff")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
EXPECTED_ERRORS = (ConfigError, data.DatasetError, CheckpointError, ShapeError, NonFiniteError, ValueError, OSError)


def _add_config_flags(parser: argparse.ArgumentParser, cls, skip=("seed", "workers")) -> None:
    hints = get_type_hints(cls)
    group = parser.add_argument_group("config keys")
    for f in fields(cls):
        if f.name not in skip:
            group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=hints[f.name], default=None, metavar=f.name.upper())


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None, help="worker threads; never changes results")
    parser.add_argument("--profile", choices=sorted(PROFILES), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atvardiff", description="Turbulence restoration with a latent-conditioned diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build a paired (clean, degraded, phi) dataset")
    _common(p)
    _add_config_flags(p, SimulateConfig)

    p = sub.add_parser("train", help="train the model or the simple-DDPM ablation")
    _common(p)
    _add_config_flags(p, TrainConfig)
    p.add_argument("--resume", action="store_true", help="continue from checkpoint_dir/latest.ckpt")

    p = sub.add_parser("restore", help="restore degraded PNG images")
    _common(p)
    _add_config_flags(p, RestoreConfig)
    p.add_argument("inputs", nargs="+", help="PNG files or directories of PNGs")

    p = sub.add_parser("eval", help="restore a dataset and write a metrics report")
    _common(p)
    _add_config_flags(p, EvalConfig)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", nargs="*", default=None, help="subset of registered cases")
    return parser


def _resolve(cls, args):
    overrides = {f.name: getattr(args, f.name, None) for f in fields(cls)}
    cfg = resolve(cls, args.profile, args.config, overrides)
    log.info("resolved %s config:\n%s", args.command, dump(cfg).rstrip())
    return cfg


def _run_config(checkpoint: str) -> TrainConfig:
    """Model config saved next to a checkpoint by the training run."""
    path = Path(checkpoint).parent / "config.txt"
    if not path.is_file():
        raise ConfigError(f"no config.txt next to checkpoint {checkpoint}")
    return resolve(TrainConfig, None, path)


def cmd_simulate(args) -> int:
    cfg = _resolve(SimulateConfig, args)
    records = data.build_dataset(cfg.clean_dir or None, cfg.out, cfg.pairs, (cfg.d_r0_lo, cfg.d_r0_hi), cfg.crop_size,
                                 cfg.seed, cfg.workers, cfg.procedural)
    print(f"wrote {len(records)} pairs to {cfg.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(TrainConfig, args)
    state = train(cfg, resume=args.resume)
    print(f"trained {state.step} steps; checkpoints in {cfg.checkpoint_dir}")
    return 0


def _expand_inputs(inputs) -> list[Path]:
    paths: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.png")))
        elif p.is_file():
            paths.append(p)
        else:
            raise FileNotFoundError(f"input not found: {p}")
    if not paths:
        raise data.DatasetError("no input images")
    return paths


def cmd_restore(args) -> int:
    cfg = _resolve(RestoreConfig, args)
    restorer = Restorer.from_checkpoint(cfg.checkpoint, _run_config(cfg.checkpoint), cfg.seed)
    paths = _expand_inputs(args.inputs)
    images = [data.to_float(data.read_image(p)) for p in paths]
    for p, img in zip(paths, images):
        if img.shape[1] % 2 or img.shape[2] % 2:
            raise ShapeError(f"{p}: height and width must be even, got {img.shape[1:]}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(i: int) -> None:
        restored = restorer(images[i][None], [i])[0]
        data.write_image(out / paths[i].name, data.to_uint8(restored))

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        list(pool.map(work, range(len(paths))))
    print(f"restored {len(paths)} images into {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(EvalConfig, args)
    run_cfg = _run_config(cfg.checkpoint)
    restorer = Restorer.from_checkpoint(cfg.checkpoint, run_cfg, cfg.seed)
    dataset = data.load_dataset(cfg.dataset, cfg.limit or None)
    echo = {"checkpoint": cfg.checkpoint, "dataset": cfg.dataset, "seed": cfg.seed, "ablation": run_cfg.ablation}
    report = metrics.evaluate(restorer, dataset, cfg.seed, cfg.chunk_size, cfg.workers, cfg.patch, cfg.n_patches, echo)
    report.write(cfg.out)
    print(f"{report.count} images: mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.4f}, "
          f"patch-Frechet {report.patch_frechet:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_cases(args.ops, seed=args.seed)
    width = max(len(r.name) for r in results)
    print(f"{'op':<{width}}  {'max_rel_err':>12}  {'tol':>8}  status")
    for r in results:
        status = "ok" if r.passed else "FAIL" + (f" ({r.error})" if r.error else "")
        print(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {r.tol:8.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} cases passed")
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "restore": cmd_restore, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    level = os.environ.get("ATVD_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck" and args.ops:
        from . import gradcases  # noqa: F401 - populates the registry

        unknown = [op for op in args.ops if op not in gradcheck.REGISTRY]
        if unknown:
            print(f"atvardiff: error: unknown gradcheck ops: {', '.join(unknown)}", file=sys.stderr)
            return 2
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as exc:
        print(f"atvardiff: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
