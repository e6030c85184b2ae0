"""Command-line entry points.

Subcommands: partition, prepass, train, compare, inspect-checkpoint.
Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checkpoint import read_records
from .config import parse_config
from .data import write_partition_set
from .divergence import prepass, select_split
from .errors import EXIT_OK, FeddncError, exit_code_for
from .experiment import (
    RunResult,
    build_dataset,
    build_partitions,
    build_state,
    emit_metrics,
    run_experiment,
)
from .report import compare_report


def _add_config_args(sub: argparse.ArgumentParser, with_algo: bool = False) -> None:
    sub.add_argument("--config", required=True, help="experiment config file")
    sub.add_argument("--seed", help="override the config's seed")
    sub.add_argument("--out", help="override the config's output location")
    if with_algo:
        sub.add_argument("--algo", choices=("fedavg", "fedprox", "dnc"),
                         help="override the config's algorithm")


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "algo", None) is not None:
        overrides["algo"] = args.algo
    return overrides


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, _overrides(args))
    train, _ = build_dataset(cfg)
    pset = build_partitions(cfg, train)
    out = Path(args.out) if args.out else Path(cfg.out) / "partitions.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_partition_set(pset, out)
    sizes = ", ".join(str(len(p)) for p in pset.partitions)
    print(f"wrote {out}: scheme {pset.scheme}, {len(pset.partitions)} collaborators "
          f"(sizes {sizes})")
    return EXIT_OK


def cmd_prepass(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, _overrides(args))
    state = build_state(cfg)
    dn = cfg.dnc
    _, profiles, _ = prepass(
        state, dn.prepass_rounds, dn.diagnostic_rounds, dn.metric,
        epochs=cfg.federation.local_epochs, eta0=cfg.federation.eta,
        decay=cfg.federation.decay,
    )
    split = select_split(profiles, dn.knee_ratio, dn.flat_tolerance)
    out = Path(cfg.out)
    result = RunResult(cfg, state.history, state.ledger, state.global_params,
                       split, profiles, out)
    emit_metrics(result, out)
    if split.kind == "split_at":
        print(f"split decision: split_at({split.split_layer}) [{split.rationale}]")
    else:
        print(f"split decision: no_split [{split.rationale}]")
    print(f"wrote divergence profiles and manifest under {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config, _overrides(args))
    result = run_experiment(cfg)
    last = result.metrics[-1]
    print(f"run '{cfg.name}' ({cfg.algorithm}) finished: {len(result.metrics)} rounds, "
          f"final accuracy {last.accuracy:.4f}, outputs under {result.out_dir}")
    if result.split is not None:
        if result.split.kind == "split_at":
            print(f"split decision: split_at({result.split.split_layer}) "
                  f"[{result.split.rationale}]")
        else:
            print(f"split decision: no_split [{result.split.rationale}]")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    out = compare_report(args.runs, args.out)
    print(f"wrote comparison report under {out}")
    return EXIT_OK


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    records = read_records(args.checkpoint)
    print(f"{args.checkpoint}: {len(records)} tensor records")
    for i in range(0, len(records), 2):
        w, b = records[i], records[i + 1]
        shape = "x".join(map(str, w.shape))
        print(f"  layer {w.layer_index:2d} {w.name:<12} weight {shape:<12} "
              f"bias {b.shape[0]:<5} |w|={float(np.linalg.norm(w.values)):.6f} "
              f"|b|={float(np.linalg.norm(b.values)):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feddnc",
        description="Deterministic federated-learning simulator with "
                    "divergence-guided divide-and-conquer training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="build and export a partition set")
    _add_config_args(p)
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("prepass", help="run the pre-pass and emit divergence profiles")
    _add_config_args(p)
    p.set_defaults(fn=cmd_prepass)

    p = sub.add_parser("train", help="run a full experiment")
    _add_config_args(p, with_algo=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="compare finished runs")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("runs", nargs="+", help="run directories to compare")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("inspect-checkpoint", help="list a checkpoint's tensors")
    p.add_argument("checkpoint", help="checkpoint file path")
    p.set_defaults(fn=cmd_inspect_checkpoint)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FeddncError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
