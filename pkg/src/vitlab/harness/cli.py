"""``vitlab`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (non-finite
values, failed gradient check, exceeded wall-time budget), 4 I/O or file
format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import (
    BudgetExceeded,
    CheckpointError,
    ConfigError,
    IdxFormatError,
    NonFiniteResult,
)
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

GRADCHECK_TOLERANCE = 1e-4


def _cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config)
    res = train(cfg)
    print(json.dumps({"checkpoint": str(res.checkpoint), "test": res.final_test}, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .train import evaluate

    print(json.dumps(evaluate(load_config(args.config), args.ckpt), sort_keys=True))
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    from .train import diagnose

    cfg = load_config(args.config)
    kw = {"mode": args.mode, "neighborhood": args.neighborhood}
    if args.threshold is not None:
        kw["value"] = args.threshold
    for d in diagnose(cfg, args.ckpt, args.out, count=args.images, **kw):
        print(d)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .train import PRESETS, gradcheck_model

    errors = gradcheck_model(PRESETS[args.preset], h=args.h)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"{name:32s} {err:.3e}")
    ok = worst < GRADCHECK_TOLERANCE
    print(f"max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} < {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_bench(args) -> int:
    from .train import bench_rows

    print(f"{'variant':24s} {'MACs':>16s} {'overhead':>9s}")
    for name, total, over in bench_rows(args.preset):
        print(f"{name:24s} {total:16d} {100 * over:8.3f}%")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .train import ablate

    cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    print(json.dumps(ablate(cfg, seeds), sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one configuration")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.set_defaults(fn=_cmd_eval)

    s = sub.add_parser("diagnose", help="write artifact reports for test images")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--images", type=int, default=4)
    s.add_argument("--mode", choices=("percentile", "absolute"), default="percentile")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--neighborhood", type=int, choices=(4, 8), default=4)
    s.set_defaults(fn=_cmd_diagnose)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("--preset", choices=("tiny",), default="tiny")
    s.add_argument("--h", type=float, default=1e-5)
    s.set_defaults(fn=_cmd_gradcheck)

    s = sub.add_parser("bench", help="FLOP overhead table")
    s.add_argument("--preset", choices=("vitb16", "vitb14"), default="vitb16")
    s.set_defaults(fn=_cmd_bench)

    s = sub.add_parser("ablate", help="train baseline / +STA / +ANF / +STA+ANF")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", default=None, help="comma-separated; default: the config seed")
    s.set_defaults(fn=_cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteResult, BudgetExceeded) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, IdxFormatError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
