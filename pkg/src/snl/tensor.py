"""Dense float64 tensors with tape-based reverse-mode gradients.

Only the primitives the gated networks need are provided: affine maps,
2-D convolution (im2col), ReLU, gated activation, residual add, reshape,
softmax cross-entropy and the temperature-scaled KL distillation loss.

Usage::

    with Tape() as tape:
        loss = softmax_cross_entropy(affine(x, W, b), labels)
    tape.backward(loss, params=[W, b])
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "KinkError",
    "affine",
    "conv2d",
    "conv_output_size",
    "relu",
    "gated_activation",
    "add",
    "reshape",
    "softmax",
    "log_softmax",
    "softmax_cross_entropy",
    "kl_soft_targets",
    "kd_loss",
    "scale",
    "sum_all",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand dimensions do not conform."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class KinkError(RuntimeError):
    """Finite differences are unstable at the probe (likely a ReLU kink)."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "snl_active_tape", default=None
)


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("primitive produced non-finite values")
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of primitives executed while the tape is active.

    A tape is bound to the current context (thread / task), so concurrent
    training runs each own their tape.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Propagate d(loss)/d(.) back through the recorded primitives.

        Every tensor in ``params`` ends up with a gradient buffer of its own
        shape, zero-filled if the loss does not depend on it.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64, copy=True)
                else:
                    inp.grad += gi
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, needs)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and needs:
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# linear primitives


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (batch, in) and ``W`` of shape (in, out)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects x[batch,in], W[in,out], b[out]; got {x.shape}, {W.shape}, {b.shape}"
        )
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: x has {x.shape[1]} features but W expects {W.shape[0]}")
    if W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: W has {W.shape[1]} outputs but b has {b.shape[0]}")
    xd, Wd = x.data, W.data

    def backward(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _record((x, W, b), xd @ Wd + b.data, backward)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise ShapeError(
            f"non-integer output size: ({size} + 2*{padding} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[batch,cin,h,w] with K[cout,cin,kh,kw]."""
    if x.data.ndim != 4 or K.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {K.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = K.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # im2col: rows are (n, ho, wo), columns are (cin, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    Kmat = K.data.reshape(cout, -1)
    out = (cols @ Kmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    padded_shape = xp.shape
    need_dx = x.requires_grad

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dK = (gm.T @ cols).reshape(K.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        if not need_dx:
            return None, dK, db
        dcols = (gm @ Kmat).reshape(n, ho, wo, cin, kh, kw)
        dxp = np.zeros(padded_shape)
        for p in range(kh):
            for q in range(kw):
                dxp[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += (
                    dcols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dK, db

    inputs = (x, K) if b is None else (x, K, b)
    return _record(inputs, np.ascontiguousarray(out), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _record((a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return _record((a,), a.data * k, lambda g: (g * k,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record((a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(tuple(shape))
    return _record((a,), out, lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# activations


def relu(z: Tensor) -> Tensor:
    zd = z.data
    # subgradient at 0 is 0
    return _record((z,), np.maximum(zd, 0.0), lambda g: (g * (zd > 0),))


def _broadcast_gate(c: np.ndarray, zshape: tuple[int, ...]) -> np.ndarray:
    """Lift a gate array to broadcast against (batch, *site_shape)."""
    site = zshape[1:]
    if c.shape == site:
        return c[None]
    if c.ndim == 1 and len(site) >= 1 and c.shape[0] == site[0]:
        return c.reshape((1, c.shape[0]) + (1,) * (len(site) - 1))
    raise ShapeError(f"gate shape {c.shape} matches neither sites {site} nor channels ({site[0] if site else '?'},)")


def gated_activation(z: Tensor, c: Tensor, mode: str = "identity") -> Tensor:
    """Gate-weighted mix of ReLU and a linear branch.

    identity mode: ``c * relu(z) + (1 - c) * z``; zero-out mode: ``c * relu(z)``.
    ``c`` either has one entry per site (z.shape[1:]) or one per channel
    (z.shape[1]); it is shared across the batch.
    """
    if mode not in ("identity", "zero-out"):
        raise ValueError(f"unknown gate mode {mode!r}")
    zd = z.data
    cb = _broadcast_gate(c.data, zd.shape)
    r = np.maximum(zd, 0.0)
    pos = zd > 0
    if mode == "identity":
        out = cb * r + (1.0 - cb) * zd
        dc_local = r - zd
    else:
        out = cb * r
        dc_local = r
    cshape = c.shape

    def backward(g):
        if mode == "identity":
            dz = g * (cb * pos + (1.0 - cb))
        else:
            dz = g * (cb * pos)
        dc = g * dc_local
        # reduce over broadcast axes back to the gate shape
        dc = dc.sum(axis=0)
        if dc.shape != cshape:
            dc = dc.reshape(cshape[0], -1).sum(axis=1)
        return dz, dc

    return _record((z, c), out, backward)


# ---------------------------------------------------------------------------
# losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    y = np.asarray(labels)
    if y.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {y.shape} != ({logits.shape[0]},)")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError(f"label out of range [0, {logits.shape[1]})")
    return y.astype(np.int64)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the integer ``labels``."""
    y = _check_labels(logits, labels)
    n = logits.shape[0]
    if n == 0:
        raise ShapeError("empty batch")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), y].mean()

    def backward(g):
        d = np.exp(lsm)
        d[np.arange(n), y] -= 1.0
        return (g * d / n,)

    return _record((logits,), np.array(loss), backward)


def kl_soft_targets(student: Tensor, teacher: Tensor, T: float) -> Tensor:
    """``T**2 * mean_batch KL(softmax(teacher/T) || softmax(student/T))``."""
    if T <= 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if student.shape != teacher.shape or student.data.ndim != 2:
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} must match [batch, classes]")
    n = student.shape[0]
    log_p = log_softmax(teacher.data / T)
    log_q = log_softmax(student.data / T)
    p = np.exp(log_p)
    v = log_p - log_q
    kl = (p * v).sum(axis=1).mean()

    def backward(g):
        ds = g * T * (np.exp(log_q) - p) / n
        dt = g * T * p * (v - (p * v).sum(axis=1, keepdims=True)) / n
        return ds, dt

    return _record((student, teacher), np.array(T * T * kl), backward)


def kd_loss(student: Tensor, teacher: Tensor, labels, T: float = 4.0,
            hard_weight: float = 0.5, soft_weight: float = 0.5) -> Tensor:
    """Weighted sum of hard-label cross-entropy and the soft-target KL term."""
    hard = softmax_cross_entropy(student, labels)
    if soft_weight == 0.0:
        return scale(hard, hard_weight)
    soft = kl_soft_targets(student, teacher, T)
    return add(scale(hard, hard_weight), scale(soft, soft_weight))


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               kink_tol: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must rebuild its computation from ``params`` on every call. Errors
    are ``|analytic - numeric| / max(1, |analytic|)``. Raises KinkError when
    differences at steps ``h`` and ``h/2`` disagree, which signals a probe
    sitting on a non-differentiable point.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out, params)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        return f().item()

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            diffs = []
            for step in (h, h / 2):
                flat[i] = orig + step
                fp = value()
                flat[i] = orig - step
                fm = value()
                diffs.append((fp - fm) / (2 * step))
            flat[i] = orig
            if abs(diffs[0] - diffs[1]) > kink_tol * max(1.0, abs(diffs[0])):
                raise KinkError(f"unstable finite difference at element {i} of {p.name or 'param'}")
            err = abs(a_flat[i] - diffs[0]) / max(1.0, abs(a_flat[i]))
            worst = max(worst, err)
    return worst
