"""Command-line entry point: run, sweep, epsilon-table, validate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import PRESETS, load_config
from .errors import ConfigError, FormatError, ParameterError, RoundError
from .runner import build_environment, epsilon_table, run_strategy, summarize, write_csv


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("config", help=f"config file, or a preset name ({', '.join(PRESETS)})")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dotted path; VALUE is parsed as JSON when possible")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fftsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every configured strategy for one seed and write a CSV")
    _add_common(p)
    p.add_argument("--out", help="CSV path (default: <output.dir>/<name>_seed<seed>.csv)")

    p = sub.add_parser("sweep", help="run k consecutive seeds and summarize final accuracy")
    _add_common(p)
    p.add_argument("--seeds", type=int, required=True, help="number of seeds, starting at the config seed")

    p = sub.add_parser("epsilon-table", help="print per-client link standard and transient outage probability")
    _add_common(p)

    p = sub.add_parser("validate", help="check a config and exit")
    _add_common(p)
    return parser


def _run_seed(cfg, seed):
    env = build_environment(cfg, seed)
    return [run_strategy(env, s) for s in cfg.strategies]


def _cmd_run(cfg, args) -> int:
    logs = _run_seed(cfg, cfg.seed)
    out = Path(args.out) if args.out else Path(cfg.output.dir) / f"{cfg.name}_seed{cfg.seed}.csv"
    write_csv(logs, out)
    for log in logs:
        print(f"{log.strategy:16s} final test accuracy {log.final_accuracy:.4f}")
    print(f"wrote {out}")
    return 0


def _cmd_sweep(cfg, args) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds", "must be >= 1")
    out_dir = Path(cfg.output.dir)
    runs = []
    for k in range(args.seeds):
        seed = cfg.seed + k
        logs = _run_seed(cfg, seed)
        write_csv(logs, out_dir / f"{cfg.name}_seed{seed}.csv")
        runs.append(logs)
    summary = summarize(runs)
    lines = ["strategy,mean_acc,std_acc,seeds"]
    for name, s in summary.items():
        lines.append(f"{name},{s['mean_acc']!r},{s['std_acc']!r},{s['seeds']}")
        print(f"{name:16s} {100 * s['mean_acc']:6.2f} +- {100 * s['std_acc']:.2f}  ({s['seeds']} seeds)")
    (out_dir / f"{cfg.name}_summary.csv").write_text("\n".join(lines) + "\n")
    (out_dir / f"{cfg.name}_summary.json").write_text(json.dumps(
        {"config": cfg.to_dict(), "seeds": [cfg.seed + k for k in range(args.seeds)], "summary": summary},
        indent=2, sort_keys=True) + "\n")
    print(f"wrote {out_dir / (cfg.name + '_summary.csv')}")
    return 0


def _cmd_epsilon(cfg, args) -> int:
    links, eps, _ = epsilon_table(cfg)
    print("client,standard,distance_m,line_of_sight,walls,epsilon")
    for i, (lk, e) in enumerate(zip(links, eps), start=1):
        print(f"{i},{lk.standard.value},{lk.distance_km * 1000:.1f},{lk.line_of_sight},{lk.wall_count},{e:.6g}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "validate":
            print(f"{args.config}: ok ({len(cfg.strategies)} strategies, {cfg.rounds} rounds)")
            return 0
        if args.command == "run":
            return _cmd_run(cfg, args)
        if args.command == "sweep":
            return _cmd_sweep(cfg, args)
        return _cmd_epsilon(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ParameterError, RoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
