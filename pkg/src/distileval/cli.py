"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data-format error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .config import load_config
from .curvature import landscape_slice, model_loss_fn, top_eigenpairs
from .datastore import import_cifar_binary, read_container, sample_fraction, synthetic_dataset, write_container
from .errors import ConfigError, DistilEvalError
from .schedules import schedule_table

log = logging.getLogger("distileval")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, e.g. --set lr.lr_max=1e-3 (repeatable)")


def _seeds(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None


def _emit(obj, out: str | None = None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _open_out(out: str | None):
    return open(out, "w", newline="") if out else sys.stdout


def cmd_teacher(args) -> int:
    cfg = load_config(args.config, args.overrides)
    ckpt, record = harness.train_teacher(cfg)
    _emit({"checkpoint": str(ckpt), "final_accuracy": record.final_accuracy, "wall_time": record.wall_time})
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.dry_run:
        _emit(harness.describe(cfg))
        return 0
    result = harness.run_experiment(cfg, _seeds(args.seeds))
    result.pop("records")
    _emit(result)
    return 0


def _analysis_inputs(args):
    model = harness.load_model(args.checkpoint)
    data = read_container(args.data)
    if args.limit:
        data = data.subset(slice(0, args.limit))
    if data.image_shape != model.spec.input_shape or data.n_classes != model.spec.num_classes:
        raise ConfigError("checkpoint and dataset shapes do not match")
    targets = harness.container_targets(data)
    return model_loss_fn(model, torch.from_numpy(data.images), targets)


def cmd_eval(args) -> int:
    _emit({"accuracy": harness.evaluate(args.checkpoint, args.data)})
    return 0


def cmd_hessian(args) -> int:
    loss_at, theta = _analysis_inputs(args)
    res = top_eigenpairs(loss_at, theta, k=args.topk, iters=args.iters, tol=args.tol, seed=args.seed)
    _emit(res.to_dict(), args.out)
    return 0


def cmd_landscape(args) -> int:
    loss_at, theta = _analysis_inputs(args)
    res = top_eigenpairs(loss_at, theta, k=2, iters=args.iters, tol=args.tol, seed=args.seed)
    v1, v2 = (v / v.norm() for v in res.eigenvectors[:2])
    grid = landscape_slice(loss_at, theta, v1, v2, args.radius, args.grid)
    f = _open_out(args.out)
    try:
        w = csv.writer(f)
        w.writerow(["alpha1", "alpha2", "loss"])
        w.writerows(grid.rows())
    finally:
        if f is not sys.stdout:
            f.close()
    return 0


def cmd_schedule(args) -> int:
    cfg = load_config(args.config, args.overrides)
    f = _open_out(args.out)
    try:
        w = csv.writer(f)
        w.writerow(["epoch", "keep_rate", "lr"])
        for i, p, lr in schedule_table(cfg.keep_rate, cfg.lr, args.epochs):
            w.writerow([i, repr(p), repr(lr)])
    finally:
        if f is not sys.stdout:
            f.close()
    return 0


def cmd_plot(args) -> int:
    written = harness.emit_plots(args.runs, render=args.render)
    _emit([str(p) for p in written])
    return 0


def cmd_synth(args) -> int:
    c = synthetic_dataset(args.per_class, args.classes, (args.channels, args.size, args.size), seed=args.seed)
    write_container(c, args.out)
    _emit({"path": args.out, "n_items": c.n_items})
    return 0


def cmd_import_cifar(args) -> int:
    c = import_cifar_binary(args.files, args.out, n_classes=args.classes, label_bytes=args.label_bytes)
    _emit({"path": args.out, "n_items": c.n_items})
    return 0


def cmd_sample(args) -> int:
    c = sample_fraction(read_container(args.data), args.fraction, args.seed)
    write_container(c, args.out)
    _emit({"path": args.out, "n_items": c.n_items, "ipc": c.ipc})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distileval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("teacher", help="train the cnn3 teacher")
    _add_config_args(p)
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("train", help="train a student under a preset")
    _add_config_args(p)
    p.add_argument("--seeds", help="comma-separated seeds; reports mean and std")
    p.add_argument("--dry-run", action="store_true", help="print the resolved component set and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    for name, func in (("hessian", cmd_hessian), ("landscape", cmd_landscape)):
        p = sub.add_parser(name, help="top Hessian eigenvalues" if name == "hessian" else "loss on the top-2 eigenplane")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--limit", type=int, default=None, help="use only the first N items")
        p.add_argument("--iters", type=int, default=100)
        p.add_argument("--tol", type=float, default=1e-4)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")
        p.set_defaults(func=func)
        if name == "hessian":
            p.add_argument("--topk", type=int, default=20)
        else:
            p.add_argument("--radius", type=float, required=True)
            p.add_argument("--grid", type=int, default=41)

    p = sub.add_parser("schedule", help="schedule utilities")
    ssub = p.add_subparsers(dest="action", required=True)
    d = ssub.add_parser("dump", help="CSV of (epoch, keep_rate, lr)")
    _add_config_args(d)
    d.add_argument("--epochs", type=int, default=None)
    d.add_argument("--out")
    d.set_defaults(func=cmd_schedule)

    p = sub.add_parser("plot", help="summarize run records as CSV (and PNG with --render)")
    p.add_argument("--runs", required=True)
    p.add_argument("--render", action="store_true")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("synth", help="write a synthetic learnable dataset container")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import-cifar", help="convert CIFAR binary batches to a container")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--label-bytes", type=int, default=1)
    p.set_defaults(func=cmd_import_cifar)

    p = sub.add_parser("sample", help="stratified fraction of a container")
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DistilEvalError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
