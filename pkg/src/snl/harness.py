"""Experiment orchestration: budget sweeps, retention tables and ablations.

Every emitted CSV starts with a ``# schema: <name>/<version>`` line followed
by a header row. Rows are written in a canonical order, so identical
configurations give byte-identical files regardless of worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Dataset, DatasetSpec, load_dataset
from .latency import LatencyModel, estimate_online_latency
from .network import (
    GatedNetwork,
    GateStateError,
    build_network,
    cnn_descriptor,
    is_binary,
    load_checkpoint,
    mlp_descriptor,
    relu_count,
    save_checkpoint,
    set_gate_mode,
)
from .trainer import (
    BUDGET_REACHED,
    COMPLETED,
    ConfigError,
    SnlConfig,
    TrainReport,
    evaluate_dataset,
    prune_baseline,
    pretrain,
    snl_run,
)

log = logging.getLogger(__name__)

VARIANTS = ("snl", "snl-zero-out", "snl-scratch", "prune-baseline")
ABLATIONS = ("lambda-grid", "lr-grid", "variant-compare")
FAILED = "failed"

PARETO_SCHEMA = "pareto/1"
PARETO_COLUMNS = ("variant", "seed", "budget", "relu_count", "test_acc", "latency_s", "status", "error")
RETENTION_SCHEMA = "retention/1"
RETENTION_COLUMNS = ("variant", "seed", "budget", "layer", "gates_before", "gates_after", "fraction")
TRACE_SCHEMA = "ablation-trace/1"
TRACE_COLUMNS = ("ablation", "value", "seed", "phase", "epoch", "loss", "test_acc", "relu_count", "lambda")


@dataclass
class ExperimentConfig:
    """Everything a sweep or ablation needs.

    ``arch`` holds ``kind`` (mlp or cnn) plus its shape keys. Budgets are
    absolute ReLU counts; ``budget_fractions`` (of the gated ReLU total) are
    used instead when ``budgets`` is empty. Seed ``s`` builds the dataset
    with seed ``dataset.seed + s`` and initialises the network with ``s``.
    """

    arch: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [32, 32]})
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    snl: SnlConfig = field(default_factory=SnlConfig)
    budgets: list[int] = field(default_factory=list)
    budget_fractions: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: [0])
    variants: list[str] = field(default_factory=lambda: ["snl"])
    pretrain_epochs: int = 40
    pretrain_lr: float = 0.05
    pretrain_batch_size: int = 64
    linear_time: float = 0.0
    t_per_1k: float = 0.021
    workers: int = 1
    output_dir: str | None = None
    ablation_grid: list[float] = field(default_factory=list)

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for name in ("budgets", "budget_fractions"):
            vals = getattr(self, name)
            if list(vals) != sorted(vals):
                raise ConfigError(f"{name} must be sorted ascending")
        if any(b < 0 for b in self.budgets):
            raise ConfigError("budgets must be nonnegative")
        if any(not 0 <= f <= 1 for f in self.budget_fractions):
            raise ConfigError("budget fractions must lie in [0, 1]")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; choose from {VARIANTS}")
        if self.arch.get("kind") not in ("mlp", "cnn"):
            raise ConfigError("arch kind must be mlp or cnn")
        if self.workers < 1 or self.pretrain_epochs < 0:
            raise ConfigError("workers >= 1 and pretrain_epochs >= 0 required")
        LatencyModel(self.t_per_1k, self.linear_time)
        self.snl.validate()
        return self

    def resolve_budgets(self, total: int) -> list[int]:
        if self.budgets:
            return list(self.budgets)
        if not self.budget_fractions:
            raise ConfigError("no budgets given")
        return [int(round(f * total)) for f in self.budget_fractions]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snl"]["adam_betas"] = list(self.snl.adam_betas)
        return d


@dataclass
class ParetoPoint:
    variant: str
    seed: int
    budget: int
    relu_count: int
    test_acc: float
    latency_s: float
    status: str
    error: str = ""


@dataclass
class SweepResult:
    points: list[ParetoPoint]
    retention: list[dict]

    def pareto_csv(self) -> str:
        return _csv(PARETO_SCHEMA, PARETO_COLUMNS,
                    [[p.variant, p.seed, p.budget, p.relu_count, repr(p.test_acc),
                      repr(p.latency_s), p.status, p.error] for p in self.points])

    def retention_csv(self) -> str:
        return _csv(RETENTION_SCHEMA, RETENTION_COLUMNS,
                    [[r[c] if c != "fraction" else repr(r[c]) for c in RETENTION_COLUMNS]
                     for r in self.retention])

    def select(self, variant: str, budget: int | None = None) -> list[ParetoPoint]:
        return [p for p in self.points if p.variant == variant and (budget is None or p.budget == budget)]


def _csv(schema: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# construction and caching


def architecture_descriptor(arch: dict, input_shape: tuple[int, ...], n_classes: int) -> dict:
    gran = arch.get("granularity", "unit")
    mode = arch.get("mode", "identity")
    if arch.get("kind") == "mlp":
        if len(input_shape) != 1:
            raise ConfigError(f"mlp needs flat inputs, dataset has shape {input_shape}")
        widths = [input_shape[0], *[int(h) for h in arch.get("hidden", [32, 32])], n_classes]
        return mlp_descriptor(widths, gran, mode)
    if arch.get("kind") == "cnn":
        if len(input_shape) != 3:
            raise ConfigError(f"cnn needs [C,H,W] inputs, dataset has shape {input_shape}")
        return cnn_descriptor(tuple(input_shape), [int(c) for c in arch.get("channels", [4, 8])],
                              n_classes, int(arch.get("kernel", 3)),
                              arch.get("strides") and [int(s) for s in arch["strides"]],
                              gran, mode, arch.get("first_act", "relu"))
    raise ConfigError(f"unknown arch kind {arch.get('kind')!r}")


def seed_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    return load_dataset(replace(cfg.dataset, seed=cfg.dataset.seed + seed))


def cell_seed(seed: int, budget: int, variant: str) -> int:
    """Independent RNG seed for one (seed, budget, variant) cell."""
    ss = np.random.SeedSequence([int(seed), int(budget), zlib.crc32(variant.encode())])
    return int(ss.generate_state(1)[0])


_PRETRAIN_CACHE: dict[str, GatedNetwork] = {}


def _pretrain_key(cfg: ExperimentConfig, seed: int) -> str:
    blob = json.dumps({"arch": cfg.arch, "data": asdict(cfg.dataset), "seed": seed,
                       "epochs": cfg.pretrain_epochs, "lr": cfg.pretrain_lr,
                       "bs": cfg.pretrain_batch_size}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_network(cfg: ExperimentConfig, seed: int, data: Dataset | None = None) -> GatedNetwork:
    """Dense teacher for ``seed``, trained once and cached in memory and on disk."""
    key = _pretrain_key(cfg, seed)
    if key in _PRETRAIN_CACHE:
        return _PRETRAIN_CACHE[key].copy()
    path = Path(cfg.output_dir) / "teachers" / f"{key}.ckpt" if cfg.output_dir else None
    if path is not None and path.exists():
        net = load_checkpoint(path)
    else:
        data = data if data is not None else seed_dataset(cfg, seed)
        desc = architecture_descriptor(cfg.arch, data.input_shape, data.n_classes)
        net = build_network(desc, seed)
        net, _ = pretrain(net, data, cfg.pretrain_epochs, cfg.pretrain_lr,
                          batch_size=cfg.pretrain_batch_size, seed=seed)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(net, path)
    _PRETRAIN_CACHE[key] = net
    return net.copy()


def run_variant(variant: str, pretrained: GatedNetwork, data: Dataset, snl_cfg: SnlConfig,
                budget: int) -> tuple[GatedNetwork, TrainReport]:
    """Apply one method to a dense pretrained network at ReLU budget ``budget``."""
    cfg = snl_cfg.with_(budget=int(budget))
    if variant == "snl":
        return snl_run(pretrained, data, cfg)
    if variant == "snl-zero-out":
        return snl_run(set_gate_mode(pretrained.copy(), "zero-out"), data, cfg, teacher=pretrained)
    if variant == "snl-scratch":
        fresh = build_network(pretrained.descriptor, cfg.seed)
        return snl_run(fresh, data, cfg, teacher=pretrained)
    if variant == "prune-baseline":
        total = pretrained.total_relus
        frac = min(1.0, max(budget / total, 1e-12))
        net, report = prune_baseline(pretrained, frac, data, cfg, teacher=pretrained)
        report.status = COMPLETED
        return net, report
    raise ConfigError(f"unknown variant {variant!r}")


# ---------------------------------------------------------------------------
# sweeps


def layer_retention_report(net: GatedNetwork) -> list[dict]:
    """Per gated layer: ReLUs before linearization, surviving ReLUs and their ratio."""
    if not is_binary(net):
        raise GateStateError("retention report needs binarized gates")
    rows = []
    for i, g in enumerate(net.gates):
        after = g.relu_count(0.5)
        rows.append({"layer": i, "gates_before": g.total_relus, "gates_after": after,
                     "fraction": after / g.total_relus})
    return rows


def _run_cell(task):
    variant, seed, budget, pretrained, data, snl_cfg, latency = task
    try:
        net, report = run_variant(variant, pretrained, data, snl_cfg, budget)
        count = relu_count(net, snl_cfg.eps)
        acc = evaluate_dataset(net, data)
        lat = estimate_online_latency(count + net.fixed_relus, latency)
        point = ParetoPoint(variant, seed, budget, count, acc, lat, report.status)
        retention = [{"variant": variant, "seed": seed, "budget": budget, **r}
                     for r in layer_retention_report(net)] if is_binary(net) else []
        return point, retention
    except Exception as exc:  # one failing cell must not stop the sweep
        log.warning("cell %s/%s/%s failed: %s", variant, seed, budget, exc)
        msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        return ParetoPoint(variant, seed, budget, -1, float("nan"), float("nan"), FAILED, msg), []


def run_pareto_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Run every (variant, seed, budget) cell and collect accuracy/latency points.

    Results are ordered by variant, seed, then budget. With an output
    directory the Pareto and retention CSVs are written there.
    """
    cfg.validate()
    latency = LatencyModel(cfg.t_per_1k, cfg.linear_time)
    tasks = []
    for seed in cfg.seeds:
        data = seed_dataset(cfg, seed)
        teacher = pretrained_network(cfg, seed, data)
        for variant in cfg.variants:
            for budget in cfg.resolve_budgets(teacher.total_relus):
                tasks.append((variant, seed, budget, teacher, data,
                              cfg.snl.with_(seed=cell_seed(seed, budget, variant)), latency))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    order = {v: i for i, v in enumerate(VARIANTS)}
    results.sort(key=lambda r: (order[r[0].variant], r[0].seed, r[0].budget))
    out = SweepResult([r[0] for r in results], [row for r in results for row in r[1]])
    if cfg.output_dir:
        d = Path(cfg.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "pareto.csv").write_text(out.pareto_csv())
        (d / "retention.csv").write_text(out.retention_csv())
    return out


# ---------------------------------------------------------------------------
# ablations


@dataclass
class AblationTrace:
    ablation: str
    value: str
    seed: int
    report: TrainReport
    final_acc: float


def _ablation_cell(task) -> AblationTrace:
    ablation, value, seed, teacher, data, snl_cfg = task
    if ablation == "lambda-grid":
        _, report = snl_run(teacher, data, snl_cfg.with_(lam0=float(value), lambda_schedule=False))
        net = None
    elif ablation == "lr-grid":
        net, report = snl_run(teacher, data, snl_cfg.with_(adam_lr=float(value)))
    else:
        net, report = run_variant(str(value), teacher, data, snl_cfg, snl_cfg.budget)
    acc = report.records[-1].test_acc if report.records else evaluate_dataset(teacher, data)
    if net is not None:
        acc = evaluate_dataset(net, data)
    return AblationTrace(ablation, str(value), seed, report, acc)


def run_ablation(ablation: str, cfg: ExperimentConfig, grid=None) -> list[AblationTrace]:
    """Epoch traces for each grid value and seed.

    ``lambda-grid`` runs with a fixed coefficient (no homotopy),
    ``lr-grid`` varies the Adam rate and ``variant-compare`` takes variant
    names as grid values. The budget is ``cfg.snl.budget`` or, if budget
    fractions are set, the first fraction of the gated ReLU total.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    grid = list(grid if grid is not None else cfg.ablation_grid)
    if not grid:
        raise ConfigError("ablation grid must be nonempty")
    if ablation == "variant-compare" and any(v not in VARIANTS for v in grid):
        raise ConfigError(f"variant-compare grid must name variants from {VARIANTS}")
    cfg.validate()
    tasks = []
    for seed in cfg.seeds:
        data = seed_dataset(cfg, seed)
        teacher = pretrained_network(cfg, seed, data)
        budget = cfg.snl.budget
        if cfg.budget_fractions:
            budget = int(round(cfg.budget_fractions[0] * teacher.total_relus))
        for value in grid:
            seed_v = cell_seed(seed, budget, f"{ablation}:{value}")
            tasks.append((ablation, value, seed, teacher, data,
                          cfg.snl.with_(budget=budget, seed=seed_v)))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            traces = list(pool.map(_ablation_cell, tasks))
    else:
        traces = [_ablation_cell(t) for t in tasks]
    if cfg.output_dir:
        d = Path(cfg.output_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"ablation-{ablation}.csv").write_text(traces_csv(traces))
    return traces


def traces_csv(traces: list[AblationTrace]) -> str:
    rows = []
    for t in traces:
        for r in t.report.records:
            rows.append([t.ablation, t.value, t.seed, r.phase, r.epoch, repr(r.loss),
                         repr(r.test_acc), r.relu_count, repr(r.lam)])
    return _csv(TRACE_SCHEMA, TRACE_COLUMNS, rows)


def epochs_to_threshold(report: TrainReport, threshold: int) -> float:
    """Joint-phase epochs until the ReLU count first drops to ``threshold``; inf if never."""
    for i, r in enumerate(report.phase("joint")):
        if r.relu_count <= threshold:
            return float(i + 1)
    return float("inf")


# ---------------------------------------------------------------------------
# key=value configuration

_LIST_INT = ("hidden", "channels", "strides", "budgets", "seeds")
_LIST_FLOAT = ("ablation_grid",)
_ARCH_KEYS = ("kind", "hidden", "channels", "strides", "kernel", "granularity", "mode", "first_act")
_DATA_KEYS = {f"data_{f.name}": f.name for f in fields(DatasetSpec)}


def _parse_bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _coerce(template, value: str):
    if isinstance(template, bool):
        return _parse_bool(value)
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    return value


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment. Keys use underscores."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def config_from_mapping(m: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from flat string keys (file or CLI flags)."""
    cfg = ExperimentConfig()
    arch = dict(cfg.arch)
    data = asdict(cfg.dataset)
    snl = {}
    snl_fields = {f.name: f for f in fields(SnlConfig)}
    defaults_snl = SnlConfig()
    try:
        for key, raw in m.items():
            if raw is None:
                continue
            raw = str(raw)
            if key == "arch":
                arch["kind"] = raw
            elif key in _ARCH_KEYS:
                arch[key] = [int(x) for x in raw.split(",") if x] if key in _LIST_INT else (
                    int(raw) if key == "kernel" else raw)
            elif key in _DATA_KEYS:
                name = _DATA_KEYS[key]
                tmpl = {"n": 0, "noise": 0.0, "seed": 0, "test_fraction": 0.0, "n_classes": 0,
                        "image_size": 0, "grid": 0}.get(name, "")
                data[name] = _coerce(tmpl, raw)
            elif key == "adam_betas":
                snl[key] = tuple(float(x) for x in raw.split(","))
            elif key in snl_fields:
                snl[key] = _coerce(getattr(defaults_snl, key), raw)
            elif key == "budgets":
                parts = [p.strip() for p in raw.split(",") if p.strip()]
                if parts and all(p.endswith("%") for p in parts):
                    cfg.budget_fractions = [float(p[:-1]) / 100 for p in parts]
                    cfg.budgets = []
                elif any(p.endswith("%") for p in parts):
                    raise ConfigError("budgets must be all absolute or all percentages")
                else:
                    cfg.budgets = [int(p) for p in parts]
            elif key == "seeds":
                cfg.seeds = [int(x) for x in raw.split(",") if x.strip()]
            elif key == "variants":
                cfg.variants = [x.strip() for x in raw.split(",") if x.strip()]
            elif key in _LIST_FLOAT:
                setattr(cfg, key, [float(x) for x in raw.split(",") if x.strip()])
            elif key in ("pretrain_epochs", "pretrain_batch_size", "workers"):
                setattr(cfg, key, int(raw))
            elif key in ("pretrain_lr", "linear_time", "t_per_1k"):
                setattr(cfg, key, float(raw))
            elif key == "output_dir":
                cfg.output_dir = raw
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value: {exc}") from exc
    cfg.arch = arch
    cfg.dataset = DatasetSpec(**data)
    cfg.snl = SnlConfig(**snl)
    return cfg
