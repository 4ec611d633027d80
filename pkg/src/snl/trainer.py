"""Training procedures: dense pretraining, the budgeted linearization loop,
distillation finetuning and an L1 filter-pruning baseline."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset
from .network import (
    Activation,
    Conv,
    Dense,
    Flatten,
    GatedNetwork,
    GateStateError,
    binarize_gates,
    freeze_gates,
    gate_hash,
    relu_count,
)
from .tensor import NonFiniteError, Tape, Tensor, kd_loss, softmax_cross_entropy

log = logging.getLogger(__name__)

BUDGET_REACHED = "budget-reached"
MAX_EPOCHS = "max-epochs"
DIVERGED = "diverged"
COMPLETED = "completed"

REPORT_SCHEMA = "train-report/1"
REPORT_COLUMNS = ("phase", "epoch", "loss", "test_acc", "relu_count", "lambda")


class ConfigError(ValueError):
    pass


@dataclass
class SnlConfig:
    lam0: float = 1e-5
    kappa: float = 1.1
    eps: float = 0.01
    budget: int = 0
    lambda_schedule: bool = True
    adam_lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    finetune_lr: float = 1e-3
    finetune_momentum: float = 0.9
    finetune_epochs: int = 20
    kd_enabled: bool = True
    kd_temperature: float = 4.0
    kd_hard_weight: float = 0.5
    kd_soft_weight: float = 0.5
    max_epochs: int = 500
    batch_size: int = 64
    clip_gates: bool = False
    gate_weight_decay: float = 0.0
    seed: int = 0

    def validate(self) -> "SnlConfig":
        if not self.lam0 > 0:
            raise ConfigError("lam0 must be > 0")
        if not self.kappa > 1:
            raise ConfigError("kappa must be > 1")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if abs(self.kd_hard_weight + self.kd_soft_weight - 1.0) > 1e-12:
            raise ConfigError("kd weights must sum to 1")
        if self.kd_temperature <= 0:
            raise ConfigError("kd temperature must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and finetune_epochs >= 0 required")
        return self

    def with_(self, **kw) -> "SnlConfig":
        return replace(self, **kw)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss: float
    test_acc: float
    relu_count: int
    lam: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    status: str = COMPLETED
    # gate fingerprints right after freezing and after finetuning
    hash_frozen: str | None = None
    hash_final: str | None = None

    def phase(self, name: str) -> list[EpochRecord]:
        return [r for r in self.records if r.phase == name]

    @property
    def lambda_trace(self) -> list[float]:
        return [r.lam for r in self.phase("joint")]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {REPORT_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            w.writerow([r.phase, r.epoch, repr(r.loss), repr(r.test_acc), r.relu_count, repr(r.lam)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data -= self.lr * b


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# helpers


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def evaluate(net: GatedNetwork, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax predictions equal to ``y``."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = net.predict_logits(x).argmax(axis=1)
    return float(np.mean(pred == y))


def evaluate_dataset(net: GatedNetwork, data: Dataset) -> float:
    return evaluate(net, data.x_test, data.y_test)


def lasso_penalty(gates) -> tuple[float, list[np.ndarray]]:
    """Sum of |c| over all gate entries and its subgradient (sign(0) = 0).

    ``gates`` is a network or a sequence of arrays/tensors.
    """
    if isinstance(gates, GatedNetwork):
        arrays = [g.values.data for g in gates.gates]
    else:
        arrays = [g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64) for g in gates]
    value = float(sum(np.abs(a).sum() for a in arrays))
    return value, [np.sign(a) for a in arrays]


def lambda_step(lam: float, count_now: int, count_prev: int, kappa: float) -> float:
    """Grow the Lasso coefficient when the ReLU count failed to decrease."""
    if not kappa > 1:
        raise ConfigError("kappa must be > 1")
    return kappa * lam if count_now >= count_prev else lam


# ---------------------------------------------------------------------------
# pretraining


def pretrain(net: GatedNetwork, data: Dataset, epochs: int = 40, lr: float = 0.1,
             momentum: float = 0.9, weight_decay: float = 5e-4, milestones=None,
             gamma: float = 0.1, batch_size: int = 64, seed: int = 0) -> tuple[GatedNetwork, TrainReport]:
    """Dense SGD training of the weights only (gates untouched).

    ``milestones`` defaults to 1/2 and 3/4 of ``epochs``, the same relative
    positions as 80/120 of a 160-epoch schedule.
    """
    if milestones is None:
        milestones = (epochs // 2, (3 * epochs) // 4)
    rng = np.random.default_rng(seed)
    params = net.weight_params()
    opt = SGD(params, lr, momentum, weight_decay)
    report = TrainReport()
    n = len(data.y_train)
    for epoch in range(epochs):
        opt.lr = lr * gamma ** sum(epoch >= m for m in milestones)
        total = 0.0
        try:
            for idx in _batches(n, batch_size, rng):
                for p in params:
                    p.grad = None
                with Tape() as tape:
                    loss = softmax_cross_entropy(net(data.x_train[idx]), data.y_train[idx])
                tape.backward(loss, params)
                opt.step()
                total += loss.item() * len(idx)
        except NonFiniteError:
            report.status = DIVERGED
            log.warning("pretraining diverged at epoch %d", epoch)
            return net, report
        acc = evaluate_dataset(net, data)
        report.records.append(EpochRecord("pretrain", epoch, total / n, acc, relu_count(net), 0.0))
    net.meta["epoch"] = net.meta.get("epoch", 0) + epochs
    return net, report


# ---------------------------------------------------------------------------
# the budgeted linearization loop


def _joint_epoch(net: GatedNetwork, data: Dataset, opt: Adam, lam: float, cfg: SnlConfig,
                 rng: np.random.Generator) -> float:
    w_params = net.weight_params()
    c_params = net.gate_params()
    params = w_params + c_params
    n = len(data.y_train)
    total = 0.0
    for idx in _batches(n, cfg.batch_size, rng):
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = softmax_cross_entropy(net(data.x_train[idx]), data.y_train[idx])
        tape.backward(loss, params)
        penalty, subgrads = lasso_penalty(c_params)
        for c, s in zip(c_params, subgrads):
            c.grad += lam * s
            if cfg.gate_weight_decay:
                c.grad += cfg.gate_weight_decay * c.data
        opt.step()
        if cfg.clip_gates:
            for c in c_params:
                np.clip(c.data, 0.0, 1.0, out=c.data)
        total += (loss.item() + lam * penalty) * len(idx)
    return total / n


def joint_phase(net: GatedNetwork, data: Dataset, cfg: SnlConfig,
                report: TrainReport | None = None) -> tuple[GatedNetwork, TrainReport]:
    """Adam over weights and gates with the L1 term until the count is within budget.

    Runs in place. Stops at ``cfg.max_epochs``; status is set accordingly.
    """
    report = report if report is not None else TrainReport()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.weight_params() + net.gate_params(), cfg.adam_lr, cfg.adam_betas, cfg.adam_eps)
    lam = cfg.lam0
    count = relu_count(net, cfg.eps)
    epoch = 0
    while count > cfg.budget and epoch < cfg.max_epochs:
        try:
            loss = _joint_epoch(net, data, opt, lam, cfg, rng)
        except NonFiniteError:
            report.status = DIVERGED
            log.warning("joint phase diverged at epoch %d", epoch)
            return net, report
        new_count = relu_count(net, cfg.eps)
        report.records.append(
            EpochRecord("joint", epoch, loss, evaluate_dataset(net, data), new_count, lam)
        )
        if cfg.lambda_schedule:
            lam = lambda_step(lam, new_count, count, cfg.kappa)
        count = new_count
        epoch += 1
    net.meta["lambda"] = lam
    net.meta["epoch"] = net.meta.get("epoch", 0) + epoch
    report.status = BUDGET_REACHED if count <= cfg.budget else MAX_EPOCHS
    return net, report


def snl_run(pretrained: GatedNetwork, data: Dataset, cfg: SnlConfig,
            teacher: GatedNetwork | None = None) -> tuple[GatedNetwork, TrainReport]:
    """Linearize ReLUs of ``pretrained`` down to ``cfg.budget`` operations.

    The input network is not modified. The teacher for distillation
    defaults to a copy of the input. When the budget already holds at entry
    the returned network is an unmodified copy with frozen all-ones gates.
    """
    cfg.validate()
    for g in pretrained.gates:
        if g.frozen:
            raise GateStateError("snl_run needs unfrozen gates")
        if not np.all(g.values.data == 1.0):
            raise GateStateError("snl_run needs all gates initialised to 1")
    net = pretrained.copy()
    teacher = teacher if teacher is not None else pretrained.copy()
    report = TrainReport()
    net, report = joint_phase(net, data, cfg, report)
    if report.status == DIVERGED:
        return net, report
    ran = bool(report.phase("joint"))
    binarize_gates(net, cfg.eps)
    freeze_gates(net)
    report.hash_frozen = gate_hash(net)
    if ran and cfg.finetune_epochs:
        try:
            finetune_kd(net, teacher, data, cfg, report)
        except NonFiniteError:
            report.status = DIVERGED
    report.hash_final = gate_hash(net)
    return net, report


def finetune_kd(student: GatedNetwork, teacher: GatedNetwork | None, data: Dataset,
                cfg: SnlConfig, report: TrainReport | None = None) -> GatedNetwork:
    """SGD finetuning of the weights with frozen gates (in place).

    With distillation enabled the loss is
    ``hard * CE + soft * T^2 * KL(teacher_T || student_T)``; otherwise
    plain cross-entropy.
    """
    if any(not g.frozen for g in student.gates):
        raise GateStateError("finetune needs frozen gates")
    use_kd = cfg.kd_enabled and teacher is not None and cfg.kd_soft_weight > 0
    rng = np.random.default_rng(cfg.seed + 1)
    params = student.weight_params()
    opt = SGD(params, cfg.finetune_lr, cfg.finetune_momentum)
    n = len(data.y_train)
    teacher_logits = teacher.predict_logits(data.x_train) if use_kd else None
    count = relu_count(student, cfg.eps)
    lam = student.meta.get("lambda", 0.0)
    for epoch in range(cfg.finetune_epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            for p in params:
                p.grad = None
            with Tape() as tape:
                out = student(data.x_train[idx])
                if use_kd:
                    loss = kd_loss(out, Tensor(teacher_logits[idx]), data.y_train[idx],
                                   cfg.kd_temperature, cfg.kd_hard_weight, cfg.kd_soft_weight)
                else:
                    loss = softmax_cross_entropy(out, data.y_train[idx])
            tape.backward(loss, params)
            opt.step()
            total += loss.item() * len(idx)
        if report is not None:
            report.records.append(
                EpochRecord("finetune", epoch, total / n, evaluate_dataset(student, data), count, lam)
            )
    return student


# ---------------------------------------------------------------------------
# structured pruning baseline


def _linear_chain(net: GatedNetwork):
    """Yield (previous linear layer, activation, next linear layer, flatten seen)
    for each gated activation at the top level of the layer list."""
    layers = net.layers
    for i, layer in enumerate(layers):
        if not (isinstance(layer, Activation) and layer.gate is not None):
            continue
        prev = next((l for l in reversed(layers[:i]) if isinstance(l, (Dense, Conv))), None)
        nxt, flat = None, False
        for l in layers[i + 1 :]:
            if isinstance(l, Flatten):
                flat = True
            elif isinstance(l, (Dense, Conv)):
                nxt = l
                break
            elif not isinstance(l, Activation):
                break
        yield prev, layer, nxt, flat


def prune_baseline(net: GatedNetwork, keep_fraction, data: Dataset | None = None,
                   cfg: SnlConfig | None = None,
                   teacher: GatedNetwork | None = None) -> tuple[GatedNetwork, TrainReport]:
    """Remove whole channels (units) ranked by the L1 norm of their incoming weights.

    Pruned channels get gate 0 in zero-out mode, and their incoming and
    outgoing weights are zeroed, so they contribute neither parameters nor
    ReLUs. ``keep_fraction`` is a float or one float per gated layer. The
    result is finetuned (with distillation from ``teacher``) when ``data``
    and ``cfg`` are given.
    """
    chain = list(_linear_chain(net))
    fracs = list(keep_fraction) if np.ndim(keep_fraction) else [float(keep_fraction)] * len(chain)
    if len(fracs) != len(chain):
        raise ConfigError(f"{len(fracs)} keep fractions for {len(chain)} gated layers")
    if any(not 0 < f <= 1 for f in fracs):
        raise ConfigError("keep_fraction must lie in (0, 1]")
    report = TrainReport()
    out = net.copy()
    if all(f == 1 for f in fracs):
        return out, report
    teacher = teacher if teacher is not None else net.copy()
    for (prev, act, nxt, flat), frac in zip(_linear_chain(out), fracs):
        if prev is None:
            raise ConfigError("gated activation without a preceding linear layer")
        if isinstance(prev, Dense):
            norms = np.abs(prev.W.data).sum(axis=0)
        else:
            norms = np.abs(prev.K.data).sum(axis=(1, 2, 3))
        n_ch = norms.size
        keep = int(np.ceil(frac * n_ch - 1e-9))
        order = np.argsort(-norms, kind="stable")
        pruned = np.sort(order[keep:])
        gate = act.gate
        mask = np.ones(n_ch)
        mask[pruned] = 0.0
        if gate.granularity == "channel" or gate.values.data.ndim == 1:
            gate.values.data = mask.copy()
        else:
            gate.values.data = np.broadcast_to(
                mask.reshape((n_ch,) + (1,) * (gate.values.data.ndim - 1)), gate.values.shape
            ).copy()
        gate.mode = "zero-out"
        if isinstance(prev, Dense):
            prev.W.data[:, pruned] = 0.0
        else:
            prev.K.data[pruned] = 0.0
        prev.b.data[pruned] = 0.0
        if isinstance(nxt, Conv):
            nxt.K.data[:, pruned] = 0.0
        elif isinstance(nxt, Dense):
            if flat:
                spatial = nxt.W.shape[0] // n_ch
                rows = (pruned[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)
                nxt.W.data[rows] = 0.0
            else:
                nxt.W.data[pruned] = 0.0
    freeze_gates(out)
    if data is not None and cfg is not None and cfg.finetune_epochs:
        finetune_kd(out, teacher, data, cfg, report)
    return out, report


def config_dict(cfg: SnlConfig) -> dict:
    d = asdict(cfg)
    d["adam_betas"] = list(cfg.adam_betas)
    return d
