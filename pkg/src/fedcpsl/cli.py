"""Command line entry point: ``fedcpsl {run,compare,check,partition-stats}``.

Exit codes: 0 success, 1 configuration error, 2 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import AlgorithmKind
from .client import effective_steps
from .config import ConfigError, ExperimentConfig, parse_config, serialize_config
from .data import PartitionConfig, build_clients
from .metrics import write_trace
from .selfcheck import gradient_selftest, identity_selftest, pseudo_label_selftest
from .server import StepSizes, validate_stepsizes
from .simulation import load_dataset, run_training, setup

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2

COMPARE_FIELDS = ("algorithm", "seed", "rounds_completed", "final_train_loss", "final_gap_global_gradnorm2",
                  "final_test_acc_global", "final_test_acc_personalized", "rounds_to_threshold", "status")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat 'key = value' configuration file")
    group = parser.add_argument_group("configuration overrides")
    for f in fields(ExperimentConfig):
        # values stay strings here and are typed by the config parser
        group.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE")


def _config_from_args(args) -> ExperimentConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, overrides)


def rounds_to_threshold(records, threshold: float, personalized: bool = True) -> int:
    """First round whose test accuracy reaches ``threshold``, or -1."""
    for rec in records:
        acc = rec.test_acc_personalized if personalized else rec.test_acc_global
        if acc >= threshold:
            return rec.round
    return -1


def _summary(config: ExperimentConfig, result) -> str:
    if not result.records:
        return f"{config.algorithm} seed={config.seed}: no completed rounds"
    last = result.records[-1]
    return (f"{config.algorithm} seed={config.seed} rounds={last.round} loss={last.train_loss:.6g} "
            f"gradnorm2={last.gap_global_gradnorm2:.6g} acc_global={last.test_acc_global:.4f} "
            f"acc_personalized={last.test_acc_personalized:.4f}")


def cmd_run(config: ExperimentConfig, out: Path, fmt: str = "csv") -> int:
    result = run_training(config)
    write_trace(result.records, out, fmt)
    print(_summary(config, result))
    if not result.ok:
        print(f"diverged: {result.failure}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _compare_one(config: ExperimentConfig) -> dict:
    result = run_training(config)
    last = result.records[-1] if result.records else None
    nan = float("nan")
    return {
        "algorithm": config.algorithm,
        "seed": config.seed,
        "rounds_completed": len(result.records),
        "final_train_loss": last.train_loss if last else nan,
        "final_gap_global_gradnorm2": last.gap_global_gradnorm2 if last else nan,
        "final_test_acc_global": last.test_acc_global if last else nan,
        "final_test_acc_personalized": last.test_acc_personalized if last else nan,
        "rounds_to_threshold": rounds_to_threshold(result.records, config.accuracy_threshold),
        "status": "ok" if result.ok else "diverged",
    }


def compare_rows(config: ExperimentConfig, algorithms: Sequence[str], seeds: Sequence[int],
                 workers: int = 1) -> list[dict]:
    """One row per (algorithm, seed), sorted by algorithm name then seed."""
    configs = [config.with_overrides(algorithm=a, seed=s) for a in algorithms for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_compare_one, configs))
    else:
        rows = [_compare_one(c) for c in configs]
    return sorted(rows, key=lambda r: (r["algorithm"], r["seed"]))


def cmd_compare(config: ExperimentConfig, algorithms: Sequence[str], seeds: Sequence[int], out: Path,
                workers: int = 1) -> int:
    rows = compare_rows(config, algorithms, seeds, workers)
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COMPARE_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    for row in rows:
        print(f"{row['algorithm']:>10} seed={row['seed']} acc_p={row['final_test_acc_personalized']:.4f} "
              f"rounds_to_threshold={row['rounds_to_threshold']} {row['status']}")
    return EXIT_DIVERGED if any(r["status"] != "ok" for r in rows) else EXIT_OK


def effective_step_range(config: ExperimentConfig) -> tuple[float, float]:
    """Smallest and largest effective local step counts any client can draw."""
    problem, _, _ = setup(config)
    gamma = config.gamma if config.kind is AlgorithmKind.FEDCPSL else 0.0
    return (effective_steps(config.epoch_min * min(problem.spe), gamma),
            effective_steps(config.epoch_max * max(problem.spe), gamma))


def check_report(config: ExperimentConfig, seed: Optional[int] = None) -> list[tuple[str, bool, str]]:
    """``(name, passed, detail)`` for the step-size conditions and the numerical self-tests."""
    seed = config.seed if seed is None else seed
    lines = []
    q_lo, q_hi = effective_step_range(config)
    # auto mode averages effective steps, so it never exceeds the largest one
    eta_g = q_hi if config.eta_g is None else config.eta_g
    steps = StepSizes(config.eta, config.eta_c_value, config.eta_v, eta_g)
    warnings = validate_stepsizes(steps, config.L_estimate, config.n_clients, config.participants, (q_lo, q_hi))
    if config.L_estimate is None:
        lines.append(("stepsize conditions", True, warnings[0]))
    elif warnings:
        lines += [("stepsize conditions", False, w) for w in warnings]
    else:
        lines.append(("stepsize conditions", True, "all evaluated bounds hold"))

    errs = gradient_selftest(seed)
    for name, err in errs.items():
        lines.append((f"gradient {name}", err < 1e-5, f"relative error {err:.3g}"))
    ids = identity_selftest(seed)
    for name, err in ids.items():
        lines.append((f"identity {name}", err < 1e-9, f"max residual {err:.3g}"))
    res = pseudo_label_selftest(seed)
    lines.append(("pseudo-label optimality", res < 1e-8, f"row gradient spread {res:.3g}"))
    return lines


def cmd_check(config: ExperimentConfig) -> int:
    """Reporting only: always exits 0 once the configuration is valid."""
    for name, ok, detail in check_report(config):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK


def partition_table(config: ExperimentConfig) -> list[dict]:
    dataset = load_dataset(config)
    part = PartitionConfig(config.n_clients, config.shards_per_client, config.epsilon, config.test_frac)
    rows = []
    for i, d in enumerate(build_clients(dataset, part, config.seed)):
        classes = sorted(set(np.concatenate([d.labeled.class_ids, d.unlabeled.diagnostic_labels(),
                                             d.test.class_ids]).tolist()))
        rows.append({"client": i, "labeled": len(d.labeled), "unlabeled": len(d.unlabeled),
                     "test": len(d.test), "classes": classes})
    return rows


def cmd_partition_stats(config: ExperimentConfig) -> int:
    print("client labeled unlabeled test classes")
    for row in partition_table(config):
        print(f"{row['client']:>6} {row['labeled']:>7} {row['unlabeled']:>9} {row['test']:>4} "
              f"{','.join(map(str, row['classes']))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcpsl", description="Personalized semi-supervised federated learning "
                                     "with momentum and control variates, plus baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration and write its per-round trace")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, default=Path("trace.csv"))
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("compare", help="train several algorithms over several seeds")
    _add_config_flags(p)
    p.add_argument("--algorithms", default=",".join(k.value for k in AlgorithmKind))
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", type=Path, default=Path("compare.csv"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("check", help="step-size conditions and numerical self-tests")
    _add_config_flags(p)

    p = sub.add_parser("partition-stats", help="per-client sample counts and classes")
    _add_config_flags(p)

    p = sub.add_parser("print-config", help="show the resolved configuration")
    _add_config_flags(p)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        if args.command == "compare":
            algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
            for a in algorithms:
                ExperimentConfig(algorithm=a)
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError:
                raise ConfigError("seeds", f"expected comma-separated integers, got {args.seeds!r}") from None
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "run":
            return cmd_run(config, args.out, args.format)
        if args.command == "compare":
            return cmd_compare(config, algorithms, seeds, args.out, args.workers)
        if args.command == "check":
            return cmd_check(config)
        if args.command == "partition-stats":
            return cmd_partition_stats(config)
    except (ValueError, OSError) as exc:
        # data that cannot be partitioned or read under this configuration
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(serialize_config(config))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
