"""Command-line front end: ``agln {gen,train,eval,gradcheck,analyze,dump}``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration or usage
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import PnmError, generate_corpus, load_split, read_pnm
from .layers import ConfigurationError, DataError
from .metrics import cost_report, evaluate, format_cost_table, metric_records
from .model import load_checkpoint, dump_features
from .tensor import NonFiniteError, Tensor, corrupt_backward
from .training import NumericalError, RunConfig, RunLockedError, manifest_path, parse_field, train

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# shorthand flags for the ablation axes: flag -> (field, value or None for "takes an argument")
ALIASES = {
    "--descriptors": ("num_descriptors", None),
    "--no-cr": ("enable_cr", False),
    "--no-sg": ("enable_sg", False),
    "--fixed-alpha": ("alpha_learnable", False),
    "--fixed-beta": ("beta_learnable", False),
    "--dense": ("variant", "agln_dense"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file applied before flags")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    for flag, (name, value) in ALIASES.items():
        if value is None:
            p.add_argument(flag, dest=name, default=None, metavar=name.upper())
        else:
            p.add_argument(flag, dest=name, action="store_const", const=value)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is None:
            continue
        changes[f.name] = parse_field(f.name, value) if isinstance(value, str) else value
    return cfg.replace(**changes) if changes else cfg


def _echo(cfg: RunConfig) -> None:
    sys.stderr.write("# resolved config\n" + cfg.to_text())


def _parse_scales(text: str) -> tuple[float, ...]:
    try:
        scales = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigurationError(f"--scales: not a list of numbers: {text!r}") from exc
    if not scales or min(scales) <= 0:
        raise ConfigurationError("--scales needs positive numbers")
    return scales


def cmd_gen(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    path = generate_corpus(cfg.corpus_spec(), cfg.corpus_dir)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    result = train(cfg, log=lambda s: print(s, flush=True))
    print(f"best_epoch={result.best_epoch} out_dir={result.out_dir}")
    last = result.history[-1]
    print(metric_records({"loss": last.loss, "miou": last.miou, "pixacc": last.pixacc}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    k = model.cfg.num_classes
    manifest = Path(args.manifest) if args.manifest else manifest_path(resolve_config(args))
    samples = load_split(manifest, args.split, k)
    if not samples:
        raise DataError(f"no samples for split {args.split!r} in {manifest}")
    scales = _parse_scales(args.scales)
    plain = scales == (1.0,) and not args.flip
    acc = evaluate(model, samples, k, None if plain else scales, args.flip)
    values = {"miou": acc.miou(), "pixacc": acc.pixacc()}
    values.update({f"iou_class{c}": v for c, v in enumerate(acc.iou_per_class())})
    print(metric_records(values))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    start = time.perf_counter()
    if args.corrupt_op:
        with corrupt_backward(args.corrupt_op):
            results = gradcheck.block_checks() + gradcheck.model_checks()
    else:
        results = gradcheck.block_checks() + gradcheck.model_checks()
    ok = True
    for name, (passed, worst) in gradcheck.summarize(results).items():
        ok &= passed
        print(f"block={name} status={'pass' if passed else 'FAIL'} max_rel_err={worst:.3e}")
    for r in results:
        if not r.passed:
            print(f"  failed: {r.name} wrt {r.target} rel_err={r.report.max_rel_err:.3e} tol={r.tol:g}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    mcfg = cfg.model_config()
    size = tuple(cfg.image_size)
    lite = mcfg.replace(lite=not mcfg.lite)
    full, lite = (mcfg, lite) if not mcfg.lite else (lite, mcfg)
    columns = {mcfg.variant: cost_report(full, size), f"{mcfg.variant}-lite": cost_report(lite, size)}
    print(format_cost_table(columns))
    records = {}
    for name, rep in columns.items():
        records[f"{name}.params"] = rep.params
        records[f"{name}.flops"] = rep.flops
        records[f"{name}.descriptor_mb"] = rep.descriptor_mem_mb
    print(metric_records(records))
    return EXIT_OK


def cmd_dump(args) -> int:
    model = load_checkpoint(args.checkpoint)
    model.eval()
    rgb = read_pnm(args.image)
    if rgb.ndim != 3:
        raise DataError(f"{args.image}: expected a color (P6) image")
    image = Tensor(np.ascontiguousarray(rgb.transpose(2, 0, 1), dtype=np.float32) / 255.0)
    channels = [int(c) for c in args.channels.split(",")] if args.channels else None
    for path in dump_features(model, image, args.stage, args.out, channels):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agln", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render the synthetic corpus")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="defaults to <corpus_dir>/manifest.txt")
    p.add_argument("--split", default="val")
    p.add_argument("--scales", default="1.0", help="comma-separated, e.g. 0.5,0.75,1.0,1.25")
    p.add_argument("--flip", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block and variant")
    p.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", help="parameter / FLOP / descriptor-memory table")
    _add_config_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dump", help="write intermediate feature maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P6 image")
    p.add_argument("--stage", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channels", help="comma-separated channel indices (default: all)")
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, DataError, PnmError, RunLockedError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
