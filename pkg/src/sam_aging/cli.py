"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .core import TrainConfig, load_image, save_image
from .evaluation import (DEFAULT_GAPS, DEFAULT_TARGETS, STANDARD_VARIANTS, ablation_run, aging_accuracy,
                         identity_vs_age_gap, write_aging_csv, write_gap_csv)

log = logging.getLogger("sam_aging")

ENV_OUT = "SAM_AGING_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _age_list(text: str) -> list[float]:
    from .analysis import age_grid

    try:
        ages = age_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not ages:
        raise argparse.ArgumentTypeError("empty age list")
    return ages


def _layers(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected a:b") from exc
    return a, b


def _position(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected x,y") from exc
    return x, y


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help=f"output path (defaults to ${ENV_OUT} where a directory is expected)")
    common.add_argument("-v", "--verbose", action="store_true")

    with_run = argparse.ArgumentParser(add_help=False)
    with_run.add_argument("--run", help=f"run directory with trained artifacts (default ${ENV_OUT})")
    with_run.add_argument("--checkpoint", help="SAM checkpoint (default RUN/sam.npz)")

    parser = _Parser(prog="sam-aging", description="Style-based age transformation on a toy generator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("pretrain-oracles", parents=[common], help="train the age/identity stand-ins")
    sub.add_parser("pretrain-inverter", parents=[common], help="train the frozen inversion encoder")

    p = sub.add_parser("train", parents=[common], help="train the aging encoder")
    p.add_argument("--steps", type=int)
    p.add_argument("--mode", choices=("residual", "direct"))
    p.add_argument("--resume", help="continue from a SAM checkpoint")

    p = sub.add_parser("transform", parents=[common, with_run], help="age one image")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--age", type=float, required=True)

    p = sub.add_parser("trace", parents=[common, with_run], help="latent path over a grid of ages")
    p.add_argument("--in", dest="inp", nargs="+", required=True)
    p.add_argument("--ages", type=_age_list, default=_age_list("5:100:5"))

    p = sub.add_parser("fit-linear", parents=[common, with_run], help="fit a linear age direction")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=50.0)

    p = sub.add_parser("traverse", parents=[common, with_run], help="walk along a linear direction")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--direction", help="linear direction file (default RUN/linear.npz)")
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--stride", type=float, default=1.0)

    p = sub.add_parser("mix", parents=[common, with_run], help="multi-modal aging with reference images")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--age", type=float, required=True)
    p.add_argument("--refs", nargs="+", required=True)
    p.add_argument("--layers", type=_layers)

    p = sub.add_parser("patch-edit", parents=[common, with_run], help="paste a patch, then age")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--patch", required=True)
    p.add_argument("--at", type=_position, required=True)
    p.add_argument("--age", type=float, required=True)

    p = sub.add_parser("eval-aging", parents=[common, with_run], help="nearest-age selection accuracy")
    p.add_argument("--targets", type=_age_list, default=list(DEFAULT_TARGETS))
    p.add_argument("--n-candidates", type=int, default=80)

    p = sub.add_parser("eval-identity", parents=[common, with_run], help="identity similarity by age gap")
    p.add_argument("--gaps", type=_age_list, default=list(DEFAULT_GAPS))

    p = sub.add_parser("ablate", parents=[common], help="train and compare ablation variants")
    p.add_argument("--variants", default=",".join(v.name for v in STANDARD_VARIANTS))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("pipeline", parents=[common], help="pretrain, train and evaluate in one run dir")
    p.add_argument("--steps", type=int)
    return parser


def load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None and args.command in ("train", "ablate", "pipeline"):
        changes["steps"] = args.steps
    if getattr(args, "mode", None):
        changes["mode"] = args.mode
    return cfg.replace(**changes)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(ENV_OUT)
    if not out:
        raise UsageError(f"no output directory: pass --out or set {ENV_OUT}")
    return Path(out)


def _out_file(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _run_dir(args) -> Path:
    run = args.run or os.environ.get(ENV_OUT)
    if not run:
        raise UsageError(f"no run directory: pass --run or set {ENV_OUT}")
    path = Path(run)
    if not path.is_dir():
        raise FileNotFoundError(f"run directory {path} does not exist")
    return path


def _trained(args, cfg):
    """Frozen networks plus the trained model of a run directory."""
    from .pipeline import load_model, prepare

    root = _run_dir(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else root / "sam.npz"
    if not ckpt_path.exists():
        raise FileNotFoundError(f"no SAM checkpoint at {ckpt_path}; run `train` first")
    run_cfg = TrainConfig.from_file(root / "config.cfg") if (root / "config.cfg").exists() else cfg
    run = prepare(run_cfg, root)
    model, _ = load_model(run, ckpt_path)
    return run, model


def _image(path, run) -> torch.Tensor:
    return load_image(path, run.generator.resolution)


def cmd_pretrain(args, cfg) -> None:
    from .pipeline import prepare

    run = prepare(cfg, _out_dir(args), with_inverter=args.command == "pretrain-inverter")
    for kind, stats in run.stats.items():
        print(kind, " ".join(f"{k}={v:.4f}" for k, v in stats.items()))


def cmd_train(args, cfg) -> None:
    from .pipeline import prepare, train_model

    out = _out_dir(args)
    run = prepare(cfg, out)
    _, ckpt = train_model(run, cfg, out, resume=args.resume)
    print(f"trained {ckpt.step} steps -> {out / 'sam.npz'}")


def cmd_transform(args, cfg) -> None:
    out = _out_file(args)
    run, model = _trained(args, cfg)
    with torch.no_grad():
        y = model.transform(_image(args.inp, run), args.age)
    save_image(y, out)
    print(f"predicted age {run.oracles.age(y).item():.1f} -> {out}")


def cmd_trace(args, cfg) -> None:
    from .analysis import path_nonlinearity, pca_project, projection_to_csv, trace_age_path, trace_to_csv

    out = _out_dir(args)
    run, model = _trained(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    traces = []
    for i, path in enumerate(args.inp):
        trace = trace_age_path(model, _image(path, run), args.ages, run.oracles.age)
        trace_to_csv(trace, out / f"trace_{i}.csv")
        traces.append(trace)
        if len(trace) >= 3:
            print(f"{path}: nonlinearity {path_nonlinearity(trace):.4f}")
    if len(args.ages) >= 2:
        coords, _ = pca_project(traces)
        projection_to_csv(traces, coords, out / "pca.csv")


def cmd_fit_linear(args, cfg) -> None:
    from .analysis import fit_run_direction

    run, _ = _trained(args, cfg)
    direction = fit_run_direction(run, args.samples, args.threshold)
    out = Path(args.out) if args.out else _run_dir(args) / "linear.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, direction=direction.direction, bias=np.float64(direction.bias),
             shape=np.array(direction.shape, dtype=np.int64))
    print(f"linear direction -> {out}")


def _load_direction(path):
    from .analysis import LinearDirection

    with np.load(path) as data:
        return LinearDirection(data["direction"], float(data["bias"]), tuple(int(v) for v in data["shape"]))


def cmd_traverse(args, cfg) -> None:
    from .analysis import path_nonlinearity, traverse, walk_codes

    out = _out_dir(args)
    run, _ = _trained(args, cfg)
    direction = _load_direction(args.direction or _run_dir(args) / "linear.npz")
    with torch.no_grad():
        code = run.inverter(_image(args.inp, run))[0]
    images = traverse(run.generator, code.double().numpy(), direction, args.steps, args.stride)
    ages = run.oracles.age(images)
    out.mkdir(parents=True, exist_ok=True)
    for i, (img, age) in enumerate(zip(images, ages)):
        save_image(img, out / f"walk_{i:02d}.png")
        print(f"offset {(i - args.steps) * args.stride:+.3f}: predicted age {age.item():.1f}")
    if args.steps >= 1:
        codes = walk_codes(code.double().numpy(), direction, args.steps, args.stride)
        print(f"nonlinearity {path_nonlinearity(codes):.3g}")


def cmd_mix(args, cfg) -> None:
    from .editing import multimodal_transform

    out = _out_dir(args)
    run, model = _trained(args, cfg)
    refs = [_image(p, run) for p in args.refs]
    outputs = multimodal_transform(model, _image(args.inp, run), args.age, refs, args.layers)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(outputs):
        save_image(img, out / f"mix_{i}.png")


def cmd_patch_edit(args, cfg) -> None:
    from .editing import edit_and_age

    out = _out_dir(args)
    run, model = _trained(args, cfg)
    patch = load_image(args.patch)[0]
    edited, aged = edit_and_age(model, _image(args.inp, run)[0], patch, args.at, args.age)
    out.mkdir(parents=True, exist_ok=True)
    save_image(edited, out / "edited.png")
    save_image(aged, out / "aged.png")


def cmd_eval_aging(args, cfg) -> None:
    run, model = _trained(args, cfg)
    result = aging_accuracy(model, run.heldout_data().images, args.targets, run.eval_predictor, args.n_candidates)
    out = Path(args.out) if args.out else _run_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_aging_csv(result, out / "aging_accuracy.csv")
    for t, mae in result.items():
        print(f"target {t:g}: MAE {mae:.2f}")


def cmd_eval_identity(args, cfg) -> None:
    run, model = _trained(args, cfg)
    result = identity_vs_age_gap(model, run.heldout_data().images, args.gaps, run.oracles.identity,
                                 run.oracles.age)
    out = Path(args.out) if args.out else _run_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    write_gap_csv(result, out / "identity_gap.csv")
    for g, cos in result.items():
        print(f"gap {g:g}: cosine {cos:.4f}")


def cmd_ablate(args, cfg) -> None:
    from .pipeline import prepare

    known = {v.name: v for v in STANDARD_VARIANTS}
    names = [n.strip() for n in args.variants.split(",") if n.strip()]
    unknown = [n for n in names if n not in known]
    if unknown or not names:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(known)}")
    out = _out_dir(args)
    run = prepare(cfg, out)
    rows = ablation_run(cfg, [known[n] for n in names], run, run.heldout_data().images, out_dir=out)
    for row in rows:
        print(f"{row.variant}: mean MAE {row.mean_mae:.2f}, mean cosine {row.mean_cosine:.4f}")


def cmd_pipeline(args, cfg) -> None:
    from .pipeline import run_pipeline

    result = run_pipeline(cfg, _out_dir(args))
    for t, mae in result.aging.items():
        print(f"target {t:g}: MAE {mae:.2f} (step 0: {result.aging_step0[t]:.2f})")
    for g, cos in result.identity.items():
        print(f"gap {g:g}: cosine {cos:.4f}")


COMMANDS = {
    "pretrain-oracles": cmd_pretrain,
    "pretrain-inverter": cmd_pretrain,
    "train": cmd_train,
    "transform": cmd_transform,
    "trace": cmd_trace,
    "fit-linear": cmd_fit_linear,
    "traverse": cmd_traverse,
    "mix": cmd_mix,
    "patch-edit": cmd_patch_edit,
    "eval-aging": cmd_eval_aging,
    "eval-identity": cmd_eval_identity,
    "ablate": cmd_ablate,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, KeyError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sam-aging: error: bad configuration: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"sam-aging: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        log.debug("command failed", exc_info=True)
        print(f"sam-aging: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
