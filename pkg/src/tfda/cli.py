"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 contract or data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import diffcore as dc
from .benchmark import BENCH_CONFIG
from .data import DEFAULT_SHIFT, DataFormatError, ShiftSpec, generate_synthetic, load_dataset, make_benchmark, save_dataset
from .gradfixtures import run_fixtures
from .metrics import macro_f1
from .model import Arch, build_model, load_model, predict, pretrain_source, save_model
from .trainer import AdaptConfig, bench_complexity, run_adaptation

log = logging.getLogger("tfda")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- config ------------------------------------------------------------------

def _convert(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{field.name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    return float(raw)


def parse_config(text: str, base: AdaptConfig = AdaptConfig()) -> AdaptConfig:
    """Apply flat ``key=value`` lines (``#`` comments allowed) to ``base``."""
    known = {f.name: f for f in dataclasses.fields(AdaptConfig)}
    updates = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise DataFormatError(f"config line {n}: expected key=value")
        if key not in known:
            raise DataFormatError(f"config line {n}: unknown key {key!r}")
        try:
            updates[key] = _convert(known[key], val)
        except ValueError as e:
            raise DataFormatError(f"config line {n}: {e}") from None
    return dataclasses.replace(base, **updates)


def _load_config(args, base: AdaptConfig = AdaptConfig()) -> AdaptConfig:
    cfg = base
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise DataFormatError(f"missing config file {path}")
        cfg = parse_config(path.read_text(encoding="utf-8"), base)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _seed(value: str) -> int:
    v = int(value)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _load_config(args)
    shift = ShiftSpec(*args.shift) if args.shift else DEFAULT_SHIFT
    bench = make_benchmark(cfg.seed, args.classes, args.channels, args.length, args.n_train, args.n_test, shift)
    out = Path(args.out)
    for name in ("source_train", "source_test", "target_train", "target_test"):
        save_dataset(getattr(bench, name), out / name)
    print(f"wrote 4 datasets to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    data = load_dataset(args.data)
    if data.labels is None:
        raise DataFormatError(f"{args.data}: pretraining needs a labeled dataset")
    m = data.meta
    model = build_model(Arch(m.channels, m.length, m.classes), init_seed=cfg.seed)
    model = pretrain_source(model, data, args.epochs, args.lr, cfg.seed, cfg.batch_size)
    save_model(model, args.out)
    pred = predict(model, data.samples)
    print(f"train macro-F1 {macro_f1(data.labels, pred.labels, m.classes).macro_f1:.6f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _load_config(args, BENCH_CONFIG if args.bench_defaults else AdaptConfig())
    model = load_model(args.model)
    target = load_dataset(args.target)
    eval_data = load_dataset(args.eval_data) if args.eval_data else None
    ts, report = run_adaptation(model, target, cfg, eval_data)
    save_model(ts.teacher, args.out)
    if args.report:
        _write_text(args.report, report.to_csv())
    print(f"adapted for {cfg.epochs} epochs; model written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _load_config(args)
    model = load_model(args.model)
    data = load_dataset(args.data)
    if data.labels is None:
        raise DataFormatError(f"{args.data}: evaluation needs labels")
    _check_shapes(model, data)
    pred = predict(model, data.samples, use_freq=not args.time_only)
    rep = macro_f1(data.labels, pred.labels, model.arch.classes)
    print(f"{rep.macro_f1:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    errors = run_fixtures(args.instances, cfg.seed, args.tol)
    for name, err in errors.items():
        print(f"{name:32s} {err:.3e} {'ok' if err <= args.tol else 'FAIL'}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst <= args.tol else EXIT_DATA


def cmd_bench(args) -> int:
    base = dataclasses.replace(BENCH_CONFIG, epochs=1, bank_capacity=64)
    cfg = _load_config(args, base)
    shift = DEFAULT_SHIFT
    src = generate_synthetic(3, 2, 128, 60, seed=cfg.seed)
    model = pretrain_source(build_model(Arch(2, 128, 3), cfg.seed), src, 1, 1e-3, cfg.seed)

    def make_target(n):
        per_class = -(-n // 3)
        return generate_synthetic(3, 2, 128, per_class, shift, cfg.seed + 7, 1).subset(np.arange(n))

    rows, flag = bench_complexity(make_target, model, args.sizes, cfg)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "seconds", "per_sample"])
    for r in rows:
        w.writerow([r.n, f"{r.seconds:.4f}", f"{r.per_sample:.6f}"])
    sys.stdout.write(buf.getvalue())
    print(f"per-sample time grows > 25%: {'yes' if flag else 'no'}")
    if args.out:
        _write_text(args.out, buf.getvalue())
    return EXIT_OK


def cmd_export(args) -> int:
    _load_config(args)
    model = load_model(args.model)
    data = load_dataset(args.data)
    _check_shapes(model, data)
    pred = predict(model, data.samples)
    D = pred.features.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*(f"f{i}" for i in range(D)), "predicted", "domain"])
    for z, y in zip(pred.features, pred.labels):
        w.writerow([*(repr(float(v)) for v in z), int(y), data.meta.domain_id])
    _write_text(args.out, buf.getvalue())
    print(f"wrote {len(data)} embeddings ({D} dims) to {args.out}")
    return EXIT_OK


def _check_shapes(model, data):
    a, m = model.arch, data.meta
    if (a.channels, a.length, a.classes) != (m.channels, m.length, m.classes):
        raise dc.ContractError(f"model expects {a.channels} x {a.length} with {a.classes} classes; "
                               f"data is {m.channels} x {m.length} with {m.classes}")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key=value overrides of adaptation settings")
    common.add_argument("--seed", type=_seed, metavar="U64", help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="tfda", description="Source-free time-series domain adaptation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate paired source/target datasets")
    s.add_argument("--out", required=True, metavar="DIR")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--channels", type=int, default=2)
    s.add_argument("--length", type=int, default=128)
    s.add_argument("--n-train", type=int, default=200, help="training samples per class")
    s.add_argument("--n-test", type=int, default=100, help="test samples per class")
    s.add_argument("--shift", type=float, nargs=4, metavar=("FREQ", "SCALE", "NOISE", "WARP"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="supervised training on labeled source data")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="MODEL")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-3)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", parents=[common], help="adapt a source model to unlabeled target data")
    s.add_argument("--model", required=True, metavar="MODEL")
    s.add_argument("--target", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="MODEL")
    s.add_argument("--report", metavar="CSV")
    s.add_argument("--eval-data", metavar="DIR", help="labeled data scored after each epoch")
    s.add_argument("--bench-defaults", action="store_true",
                   help="start from the desk-scale benchmark settings instead of the library defaults")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", parents=[common], help="print macro-F1 on a labeled dataset")
    s.add_argument("--model", required=True, metavar="MODEL")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--time-only", action="store_true", help="score the time branch alone")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and loss")
    s.add_argument("--instances", type=int, default=1)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="adaptation time per sample across target sizes")
    s.add_argument("--sizes", type=int, nargs="+", default=[96, 192, 384])
    s.add_argument("--out", metavar="CSV")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("export-embeddings", parents=[common], help="write time-branch features to CSV")
    s.add_argument("--model", required=True, metavar="MODEL")
    s.add_argument("--data", required=True, metavar="DIR")
    s.add_argument("--out", required=True, metavar="CSV")
    s.set_defaults(func=cmd_export)
    return p


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(sys.argv[1:] if argv is None else argv))
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DataFormatError, dc.ContractError, ValueError, OSError, FloatingPointError) as e:
        print(f"tfda {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
