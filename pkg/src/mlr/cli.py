"""Command-line entry point: ``mlr {train,eval,ablate,plot,pretrain}``."""
from __future__ import annotations

import argparse
import glob
import logging
import sys
from pathlib import Path

from .config import load_config, parse_overrides, serialize
from .errors import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more seeds")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _common(p)
    p.add_argument("--grid", action="append", default=[],
                   help="named grid (see GRIDS) or KEY=[v1, v2, ...]; repeat to cross grids")

    p = sub.add_parser("plot", help="plot training curves and profiles from metric logs")
    p.add_argument("--logs", action="append", required=True, metavar="LABEL=GLOB",
                   help="metric logs for one method, e.g. MLR=runs/mlr/*/metrics.jsonl")
    p.add_argument("--out", default="plots")

    p = sub.add_parser("pretrain", help="auxiliary-loss-only encoder pretraining")
    _common(p)
    p.add_argument("--updates", type=int, default=1000)
    p.add_argument("--collect-steps", type=int)
    return parser


def _config(args):
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["run.seeds"] = [args.seed]
    if args.out is not None:
        overrides["run.out"] = args.out
    return load_config(args.config, overrides)


def _grid(specs):
    from .runner import GRIDS
    grid = {}
    for spec in specs:
        if spec in GRIDS:
            grid.update(GRIDS[spec])
        elif "=" in spec:
            key, values = next(iter(parse_overrides([spec]).items()))
            if not isinstance(values, list):
                raise ConfigError(f"grid values for {key} must be a list")
            grid[key] = values
        else:
            raise ConfigError(f"unknown grid {spec!r}; named grids: {sorted(GRIDS)}")
    return grid or {"variant": ["MLR"]}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            from .plots import emit_plots
            logs = {}
            for item in args.logs:
                label, _, pattern = item.partition("=")
                paths = sorted(glob.glob(pattern))
                if not paths:
                    raise FileNotFoundError(f"no logs match {pattern!r}")
                logs[label] = paths
            for path in emit_plots(logs, args.out):
                print(path)
            return EXIT_OK
        cfg = _config(args)
        grid = _grid(args.grid) if args.command == "ablate" else None
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        from . import runner
        if args.command == "train":
            if args.print_config:
                print(serialize(cfg), end="")
                return EXIT_OK
            out = Path(cfg["run.out"])
            for seed in cfg.seeds:
                res = runner.run_train(cfg, seed=seed, out=out / f"seed{seed}", resume=args.resume)
                print(f"seed {seed}: env steps {res.env_steps}, eval return {res.final_eval}, "
                      f"log {res.log_path}")
        elif args.command == "eval":
            mean, std = runner.run_eval(cfg, args.checkpoint, args.episodes, seed=cfg.seeds[0])
            print(f"return {mean:.3f} +- {std:.3f}")
        elif args.command == "ablate":
            rows = runner.run_ablation(cfg, grid, out=Path(cfg["run.out"]))
            path = runner.write_ablation(rows, cfg["run.out"])
            print(path.read_text(), end="")
        elif args.command == "pretrain":
            path = runner.run_pretrain(cfg, args.updates, seed=cfg.seeds[0], out=cfg["run.out"],
                                       collect_steps=args.collect_steps)
            print(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any failure during a run maps to the runtime exit code
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
