"""Command-line entry point: ``pepinet <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import save_client_data, load_mnist, write_idx
from .errors import ConfigError
from .experiment import check_method, execute, param_report, prepare_data, resolve_schedule
from .federation import METHODS

log = logging.getLogger("pepinet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--preset", choices=("full", "desk"))
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pepinet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="prepare and cache per-client multi-view data")
    _common(p)
    p.add_argument("--export-idx", type=Path, metavar="DIR", help="also write the MNIST source as IDX files")

    p = sub.add_parser("train", help="run one method over the schedule")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("compare", help="run all four methods on shared data")
    _common(p)
    p.add_argument("--no-svg", action="store_true")

    p = sub.add_parser("param-count", help="trainable/effective parameter counts per method")
    _common(p)

    p = sub.add_parser("validate", help="check config and schedule")
    _common(p)
    p.add_argument("--method", choices=METHODS)
    return parser


def _run(args) -> int:
    overrides = {"seed": args.seed, "preset": args.preset, "method": getattr(args, "method", None)}
    if args.out is not None:
        overrides["out"] = str(args.out)
    cfg = load_config(args.config, **overrides)
    out = Path(cfg.out)

    if args.command == "validate":
        schedule = resolve_schedule(cfg)
        check_method(cfg, cfg.method, schedule)
        print(f"ok: {schedule.n} clients, {len(schedule.slots)} slot(s), scales per slot "
              f"{[schedule.scales(s) for s in range(len(schedule.slots))]}")
        return 0

    if args.command == "param-count":
        report = param_report(cfg, resolve_schedule(cfg))
        text = json.dumps(report, indent=2, sort_keys=True)
        print(text)
        if args.out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "param_counts.json").write_text(text + "\n")
        return 0

    if args.command == "gen-data":
        schedule = resolve_schedule(cfg)
        data = prepare_data(cfg, schedule)
        out.mkdir(parents=True, exist_ok=True)
        save_client_data(data.clients, out / "clients.pepd")
        if args.export_idx is not None:
            train, test, _ = load_mnist(cfg.mnist_dir)
            args.export_idx.mkdir(parents=True, exist_ok=True)
            write_idx(train, args.export_idx / "train-images-idx3-ubyte", args.export_idx / "train-labels-idx1-ubyte")
            write_idx(test, args.export_idx / "t10k-images-idx3-ubyte", args.export_idx / "t10k-labels-idx1-ubyte")
        (out / "manifest.json").write_text(json.dumps({
            "command": "gen-data", "config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
            "data_source": data.source, "data_notes": data.notes,
        }, indent=2, sort_keys=True) + "\n")
        print(f"wrote {out / 'clients.pepd'} ({len(data.clients)} clients, source {data.source})")
        return 0

    methods = [cfg.method] if args.command == "train" else list(METHODS)
    metrics = execute(cfg, methods, out, args.command, svg=not args.no_svg)
    for m in methods:
        final = metrics.final(m)
        if final:
            mean = sum(final.values()) / len(final)
            print(f"{m:10s} final mean accuracy {mean:.4f}  " + " ".join(f"{c}={v:.4f}" for c, v in sorted(final.items())))
    print(f"artifacts in {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
