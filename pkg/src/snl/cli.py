"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 run failure,
3 invariant violation detected.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import capacity, latency
from .data import DatasetError, DatasetSpec
from .harness import (
    ABLATIONS,
    FAILED,
    config_from_mapping,
    layer_retention_report,
    pretrained_network,
    read_config_file,
    run_ablation,
    run_pareto_sweep,
    seed_dataset,
    traces_csv,
)
from .network import ArchitectureError, CheckpointError, GateStateError, is_binary, load_checkpoint, \
    relu_count, save_checkpoint
from .trainer import BUDGET_REACHED, DIVERGED, ConfigError, SnlConfig, evaluate_dataset, \
    prune_baseline, snl_run

EXIT_OK, EXIT_CONFIG, EXIT_RUN, EXIT_INVARIANT = 0, 1, 2, 3

_EXPERIMENT_KEYS = ["arch", "hidden", "channels", "strides", "kernel", "granularity", "mode",
                    "first_act", "budgets", "seeds", "variants", "ablation_grid", "pretrain_epochs",
                    "pretrain_lr", "pretrain_batch_size", "workers", "linear_time", "t_per_1k",
                    "output_dir"]
_SNL_KEYS = [f.name for f in fields(SnlConfig)]
_DATA_KEYS = [f"data_{f.name}" for f in fields(DatasetSpec)]


class InvariantViolation(RuntimeError):
    pass


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key = value file; command-line flags override it")
    g = p.add_argument_group("experiment settings")
    for key in _EXPERIMENT_KEYS + _DATA_KEYS + _SNL_KEYS:
        g.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V")
    return p


def _experiment(args):
    mapping = read_config_file(args.config) if args.config else {}
    for key in _EXPERIMENT_KEYS + _DATA_KEYS + _SNL_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            mapping[key] = v
    return config_from_mapping(mapping).validate()


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _load_teacher(args, cfg):
    seed = cfg.seeds[0]
    data = seed_dataset(cfg, seed)
    if getattr(args, "checkpoint", None):
        net = load_checkpoint(args.checkpoint)
        if tuple(net.descriptor["input_shape"]) != data.input_shape:
            raise ConfigError("checkpoint input shape does not match the dataset")
        return net, data
    return pretrained_network(cfg, seed, data), data


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    cfg = _experiment(args)
    net, data = _load_teacher(argparse.Namespace(), cfg)
    save_checkpoint(net, args.out)
    print(f"test_acc={evaluate_dataset(net, data):.4f} relus={net.total_relus} -> {args.out}")
    return EXIT_OK


def cmd_snl(args) -> int:
    cfg = _experiment(args)
    teacher, data = _load_teacher(args, cfg)
    snl_cfg = cfg.snl.with_(seed=cfg.seeds[0])
    net, report = snl_run(teacher, data, snl_cfg)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    if report.status == DIVERGED:
        print("run diverged", file=sys.stderr)
        return EXIT_RUN
    count = relu_count(net, snl_cfg.eps)
    if report.status == BUDGET_REACHED and (count > snl_cfg.budget or not is_binary(net)):
        raise InvariantViolation(f"budget reached but relu_count {count} > {snl_cfg.budget}")
    lam = report.lambda_trace
    if any(b < a for a, b in zip(lam, lam[1:])):
        raise InvariantViolation("lambda trace decreased")
    if report.hash_frozen != report.hash_final:
        raise InvariantViolation("gates changed during finetuning")
    if args.out:
        save_checkpoint(net, args.out)
    print(f"status={report.status} relu_count={count} budget={snl_cfg.budget} "
          f"test_acc={evaluate_dataset(net, data):.4f}")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _experiment(args)
    teacher, data = _load_teacher(args, cfg)
    net, report = prune_baseline(teacher, args.keep_fraction, data, cfg.snl.with_(seed=cfg.seeds[0]))
    if args.out:
        save_checkpoint(net, args.out)
    if args.report:
        Path(args.report).write_text(report.to_csv())
    print(f"relu_count={relu_count(net)} test_acc={evaluate_dataset(net, data):.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    result = run_pareto_sweep(cfg)
    if not cfg.output_dir:
        sys.stdout.write(result.pareto_csv())
    bad = [p for p in result.points if p.status == BUDGET_REACHED and p.relu_count > p.budget]
    if bad:
        raise InvariantViolation(f"{len(bad)} budget-reached rows exceed their budget")
    return EXIT_RUN if any(p.status == FAILED for p in result.points) else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _experiment(args)
    traces = run_ablation(args.ablation, cfg)
    if not cfg.output_dir:
        sys.stdout.write(traces_csv(traces))
    return EXIT_OK


def cmd_capacity_verify(args) -> int:
    report = capacity.verify_capacity_bounds(args.trials, (1, args.d_max), seed=args.seed)
    _write(report.to_csv(), args.out)
    print(f"trials={len(report.rows)} violations={len(report.violations)} "
          f"inexact={len(report.inexact)} max_ratio={report.max_ratio:.3f}", file=sys.stderr)
    if not report.ok:
        raise InvariantViolation("piece bound violated or oracle inexact")
    return EXIT_OK


def cmd_capacity_optimal(args) -> int:
    try:
        a1, a2 = capacity.optimal_alphas(args.d1, args.d2, args.budget)
        print(f"alpha1={a1!r} alpha2={a2!r}")
    except capacity.InteriorSolutionError as exc:
        print(f"closed form: {exc}")
    k1, k2 = capacity.rounded_allocation(args.d1, args.d2, int(args.budget))
    g1, g2, obj = capacity.grid_search_allocation(args.d1, args.d2, int(args.budget))
    print(f"rounded k1={k1} k2={k2} objective={capacity.allocation_objective(k1, k2, args.d1, args.d2)}")
    print(f"grid    k1={g1} k2={g2} objective={obj}")
    return EXIT_OK


def cmd_latency_estimate(args) -> int:
    model = latency.LatencyModel(args.t_per_1k, args.linear_time)
    counts = list(args.relu_count or [])
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        if args.measure:
            model = latency.LatencyModel(args.t_per_1k, latency.measure_linear_time(
                net, net.descriptor["input_shape"], args.repeats))
        counts.append(relu_count(net) + net.fixed_relus)
    if not counts:
        raise ConfigError("give --relu-count or --checkpoint")
    _write(latency.estimates_csv(counts, model), args.out)
    return EXIT_OK


def cmd_latency_fit(args) -> int:
    pts = latency.read_points_csv(Path(args.points).read_text())
    try:
        slope, icept = latency.fit_per_relu_cost(pts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"slope_per_relu={slope!r} slope_per_1k={slope * 1000!r} intercept={icept!r}")
    return EXIT_OK


def cmd_report_retention(args) -> int:
    net = load_checkpoint(args.checkpoint)
    rows = layer_retention_report(net)
    lines = ["# schema: retention/1", "layer,gates_before,gates_after,fraction"]
    lines += [f"{r['layer']},{r['gates_before']},{r['gates_after']},{r['fraction']!r}" for r in rows]
    _write("\n".join(lines) + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snl", description="Selective ReLU linearization toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _config_parent()

    p = sub.add_parser("pretrain", parents=[common], help="train a dense network")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("snl", parents=[common], help="linearize a network to a ReLU budget")
    p.add_argument("--checkpoint", help="pretrained checkpoint (otherwise pretrain first)")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--report", help="epoch trace CSV")
    p.set_defaults(func=cmd_snl)

    p = sub.add_parser("prune", parents=[common], help="L1 channel-pruning baseline")
    p.add_argument("--checkpoint")
    p.add_argument("--keep-fraction", type=float, required=True)
    p.add_argument("--out")
    p.add_argument("--report")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("sweep", parents=[common], help="Pareto sweep over budgets, seeds and variants")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", parents=[common], help="epoch traces over a parameter grid")
    p.add_argument("--ablation", choices=ABLATIONS, required=True)
    p.set_defaults(func=cmd_ablate)

    cap = sub.add_parser("capacity", help="capacity bounds").add_subparsers(dest="action", required=True)
    p = cap.add_parser("verify", help="check the piece bound on random small networks")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--d-max", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_capacity_verify)
    p = cap.add_parser("optimal", help="optimal per-layer retention under a budget")
    p.add_argument("--d1", type=int, required=True)
    p.add_argument("--d2", type=int, required=True)
    p.add_argument("--budget", type=float, required=True)
    p.set_defaults(func=cmd_capacity_optimal)

    lat = sub.add_parser("latency", help="online latency model").add_subparsers(dest="action", required=True)
    p = lat.add_parser("estimate", help="latency from ReLU counts")
    p.add_argument("--relu-count", type=int, nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--t-per-1k", type=float, default=latency.DEFAULT_T_PER_1K)
    p.add_argument("--linear-time", type=float, default=0.0)
    p.add_argument("--measure", action="store_true", help="time the checkpoint's forward pass")
    p.add_argument("--repeats", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_latency_estimate)
    p = lat.add_parser("fit", help="least-squares cost per ReLU")
    p.add_argument("--points", required=True, help="CSV of relu_count,latency")
    p.set_defaults(func=cmd_latency_fit)

    rep = sub.add_parser("report", help="reports").add_subparsers(dest="action", required=True)
    p = rep.add_parser("retention", help="per-layer retention of a linearized checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report_retention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, DatasetError, ArchitectureError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GateStateError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
