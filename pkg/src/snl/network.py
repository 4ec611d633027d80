"""Gated-activation networks: construction, forward pass, gate accounting,
binarization/freezing and the checkpoint container."""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    affine,
    conv2d,
    conv_output_size,
    gated_activation,
    relu,
    reshape,
)

GRANULARITIES = ("unit", "channel")
MODES = ("identity", "zero-out")


class ArchitectureError(ValueError):
    """Layer descriptor is inconsistent."""


class GateStateError(RuntimeError):
    """Gate operation not allowed in the current gate state."""


@dataclass
class GateVector:
    """Relaxed slope parameters for one activation layer.

    ``site_shape`` is the activation shape without the batch axis. For
    channel granularity there is one value per channel and each value stands
    for ``positions`` ReLU operations.
    """

    values: Tensor
    site_shape: tuple[int, ...]
    granularity: str = "unit"
    mode: str = "identity"
    frozen: bool = False
    epsilon: float = 0.01

    @property
    def positions(self) -> int:
        """ReLU operations represented by a single gate entry."""
        if self.granularity == "unit":
            return 1
        return int(np.prod(self.site_shape[1:], dtype=np.int64))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def total_relus(self) -> int:
        return self.size * self.positions

    def alive(self, eps: float) -> np.ndarray:
        return self.values.data > eps

    def relu_count(self, eps: float) -> int:
        return int(np.count_nonzero(self.alive(eps))) * self.positions


class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        std = np.sqrt(2.0 / n_in)
        self.W = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), True, "W")
        bound = 1.0 / np.sqrt(n_in)
        self.b = Tensor(rng.uniform(-bound, bound, n_out), True, "b")

    def params(self) -> list[Tensor]:
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.W, self.b)


class Conv:
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator):
        fan_in = c_in * k * k
        self.K = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)), True, "K")
        bound = 1.0 / np.sqrt(fan_in)
        self.b = Tensor(rng.uniform(-bound, bound, c_out), True, "b")
        self.stride = stride
        self.padding = padding

    def params(self) -> list[Tensor]:
        return [self.K, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.K, self.b, self.stride, self.padding)


class Flatten:
    kind = "flatten"

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return reshape(x, (x.shape[0], -1))


class Activation:
    """Plain ReLU (``gate is None``) or a gated activation."""

    kind = "act"

    def __init__(self, gate: GateVector | None):
        self.gate = gate

    def params(self) -> list[Tensor]:
        return []

    def __call__(self, z: Tensor) -> Tensor:
        if self.gate is None:
            return relu(z)
        return gated_activation(z, self.gate.values, self.gate.mode)


class Residual:
    kind = "residual"

    def __init__(self, body: list):
        self.body = body

    def params(self) -> list[Tensor]:
        return [p for layer in self.body for p in layer.params()]

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.body:
            h = layer(h)
        return add(x, h)


@dataclass
class GatedNetwork:
    """Layer stack whose activations carry gate vectors.

    ``descriptor`` is the JSON-serializable architecture description the
    network was built from; ``meta`` carries seed / epoch / lambda.
    """

    descriptor: dict
    layers: list
    meta: dict = field(default_factory=dict)

    # -- traversal -------------------------------------------------------
    def _walk(self, layers=None) -> Iterator:
        for layer in self.layers if layers is None else layers:
            yield layer
            if isinstance(layer, Residual):
                yield from self._walk(layer.body)

    def gated_layers(self) -> list[Activation]:
        return [l for l in self._walk() if isinstance(l, Activation) and l.gate is not None]

    @property
    def gates(self) -> list[GateVector]:
        return [l.gate for l in self.gated_layers()]

    def weight_params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def gate_params(self) -> list[Tensor]:
        return [g.values for g in self.gates if not g.frozen]

    @property
    def total_gates(self) -> int:
        return sum(g.size for g in self.gates)

    @property
    def total_relus(self) -> int:
        """Gated ReLU operations when every gate is on."""
        return sum(g.total_relus for g in self.gates)

    @property
    def fixed_relus(self) -> int:
        """ReLU operations in ungated (always-on) activation layers."""
        return sum(int(n) for n in self.descriptor.get("_plain_relu_sites", []))

    # -- evaluation ------------------------------------------------------
    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = layer(h)
        return h

    def predict_logits(self, X: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = [self(X[i : i + batch_size]).data for i in range(0, len(X), batch_size)]
        return np.concatenate(out, axis=0)

    def copy(self) -> "GatedNetwork":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# construction


def mlp_descriptor(widths: list[int], granularity: str = "unit", mode: str = "identity",
                   gate_first: bool = True) -> dict:
    """Descriptor for dense ``widths[0] -> ... -> widths[-1]`` with gated hidden layers."""
    layers: list[dict] = []
    for i, w in enumerate(widths[1:]):
        layers.append({"type": "dense", "out": int(w)})
        if i < len(widths) - 2:
            layers.append({"type": "act", "gated": gate_first or i > 0})
    return {"input_shape": [int(widths[0])], "layers": layers,
            "granularity": granularity, "mode": mode}


def cnn_descriptor(input_shape: tuple[int, int, int], channels: list[int], n_classes: int,
                   kernel: int = 3, strides: list[int] | None = None,
                   granularity: str = "unit", mode: str = "identity",
                   first_act: str = "relu") -> dict:
    """Conv stack followed by a dense classifier.

    ``first_act`` is one of ``relu`` (plain, ungated), ``none`` (no
    activation after the first conv) or ``gated``.
    """
    if first_act not in ("relu", "none", "gated"):
        raise ArchitectureError(f"first_act must be relu, none or gated; got {first_act!r}")
    strides = strides or [1] * len(channels)
    if len(strides) != len(channels):
        raise ArchitectureError("strides and channels differ in length")
    layers: list[dict] = []
    for i, (ch, s) in enumerate(zip(channels, strides)):
        layers.append({"type": "conv", "out": int(ch), "kernel": kernel, "stride": int(s),
                       "padding": kernel // 2})
        if i == 0 and first_act == "none":
            continue
        layers.append({"type": "act", "gated": not (i == 0 and first_act == "relu")})
    layers += [{"type": "flatten"}, {"type": "dense", "out": int(n_classes)}]
    return {"input_shape": [int(d) for d in input_shape], "layers": layers,
            "granularity": granularity, "mode": mode}


def _build_layers(specs: list[dict], shape: tuple[int, ...], desc: dict, rng, prev_linear: bool,
                  plain_sites: list[int]):
    layers = []
    for spec in specs:
        kind = spec.get("type")
        if kind == "dense":
            if len(shape) != 1:
                raise ArchitectureError(f"dense layer needs a flat input, got shape {shape}")
            out = int(spec["out"])
            if out < 1:
                raise ArchitectureError("dense width must be positive")
            layers.append(Dense(shape[0], out, rng))
            shape, prev_linear = (out,), True
        elif kind == "conv":
            if len(shape) != 3:
                raise ArchitectureError(f"conv layer needs [C,H,W] input, got shape {shape}")
            k = int(spec.get("kernel", 3))
            s = int(spec.get("stride", 1))
            p = int(spec.get("padding", 0))
            try:
                h = conv_output_size(shape[1], k, s, p)
                w = conv_output_size(shape[2], k, s, p)
            except ShapeError as exc:
                raise ArchitectureError(str(exc)) from exc
            out = int(spec["out"])
            layers.append(Conv(shape[0], out, k, s, p, rng))
            shape, prev_linear = (out, h, w), True
        elif kind == "flatten":
            layers.append(Flatten())
            shape = (int(np.prod(shape)),)
        elif kind == "act":
            if not prev_linear:
                raise ArchitectureError("activation must follow a linear layer")
            if spec.get("gated", True):
                gran = spec.get("granularity", desc.get("granularity", "unit"))
                mode = spec.get("mode", desc.get("mode", "identity"))
                if gran not in GRANULARITIES or mode not in MODES:
                    raise ArchitectureError(f"bad gate granularity/mode {gran!r}/{mode!r}")
                gshape = shape if gran == "unit" else (shape[0],)
                gate = GateVector(Tensor(np.ones(gshape), True, "c"), tuple(shape), gran, mode)
                layers.append(Activation(gate))
            else:
                layers.append(Activation(None))
                plain_sites.append(int(np.prod(shape)))
            prev_linear = False
        elif kind == "residual":
            body, body_shape = _build_layers(spec["body"], shape, desc, rng, prev_linear, plain_sites)
            if body_shape != shape:
                raise ArchitectureError(f"residual body maps {shape} to {body_shape}")
            layers.append(Residual(body))
            prev_linear = False
        else:
            raise ArchitectureError(f"unknown layer type {kind!r}")
    return layers, shape


def build_network(descriptor: dict, seed: int = 0) -> GatedNetwork:
    """Instantiate a network with Kaiming fan-in weights and all gates at 1."""
    desc = copy.deepcopy(descriptor)
    desc.pop("_plain_relu_sites", None)
    if "input_shape" not in desc or "layers" not in desc:
        raise ArchitectureError("descriptor needs input_shape and layers")
    rng = np.random.default_rng(seed)
    plain: list[int] = []
    layers, out_shape = _build_layers(desc["layers"], tuple(desc["input_shape"]), desc, rng,
                                      False, plain)
    if len(out_shape) != 1:
        raise ArchitectureError(f"network must end in a flat output, got {out_shape}")
    desc["_plain_relu_sites"] = plain
    return GatedNetwork(desc, layers, {"seed": int(seed), "epoch": 0, "lambda": 0.0})


# ---------------------------------------------------------------------------
# gate accounting


def relu_count(net: GatedNetwork, eps: float = 0.01) -> int:
    """ReLU operations whose gate is strictly above ``eps``."""
    return sum(g.relu_count(eps) for g in net.gates)


def is_binary(net: GatedNetwork) -> bool:
    return all(np.all((g.values.data == 0.0) | (g.values.data == 1.0)) for g in net.gates)


def binarize_gates(net: GatedNetwork, eps: float = 0.01) -> GatedNetwork:
    """Replace every gate by 1.0 if it exceeds ``eps``, else 0.0 (in place)."""
    for g in net.gates:
        if g.frozen:
            raise GateStateError("gates are frozen; binarize before freezing")
        g.values.data = (g.values.data > eps).astype(np.float64)
        g.values.grad = None
    return net


def freeze_gates(net: GatedNetwork) -> GatedNetwork:
    if not is_binary(net):
        raise GateStateError("cannot freeze non-binary gates; binarize first")
    for g in net.gates:
        g.frozen = True
        g.values.requires_grad = False
        g.values.grad = None
    return net


def set_gate_mode(net: GatedNetwork, mode: str) -> GatedNetwork:
    if mode not in MODES:
        raise ValueError(f"unknown gate mode {mode!r}")
    for g in net.gates:
        g.mode = mode
    net.descriptor["mode"] = mode
    return net


def gate_hash(net: GatedNetwork) -> str:
    """CRC32 over all gate buffers; used to detect any change to C."""
    crc = 0
    for g in net.gates:
        crc = zlib.crc32(np.ascontiguousarray(g.values.data, dtype="<f8").tobytes(), crc)
    return f"{crc:08x}"


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic            8 bytes  b"SNLCKPT\x00"
#   version          u32
#   descriptor_len   u32
#   descriptor       UTF-8 JSON (architecture, gate metadata, buffer shapes, meta)
#   buffers          f64 values, in descriptor["buffers"] order
#   crc32            u32 over every preceding byte

CHECKPOINT_MAGIC = b"SNLCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint (bad magic or malformed header)."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _named_buffers(net: GatedNetwork) -> list[tuple[str, Tensor]]:
    out = [(f"w{i}", p) for i, p in enumerate(net.weight_params())]
    out += [(f"c{i}", g.values) for i, g in enumerate(net.gates)]
    return out


def save_checkpoint(net: GatedNetwork, path) -> None:
    buffers = _named_buffers(net)
    header: dict[str, Any] = {
        "architecture": net.descriptor,
        "gates": [
            {"granularity": g.granularity, "mode": g.mode, "frozen": g.frozen, "epsilon": g.epsilon}
            for g in net.gates
        ],
        "buffers": [{"name": n, "shape": list(t.shape)} for n, t in buffers],
        "meta": net.meta,
    }
    desc = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", CHECKPOINT_VERSION, len(desc))
    body += desc
    for _, t in buffers:
        body += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> GatedNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    version, dlen = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 16 + dlen:
        raise CheckpointTruncatedError(f"{path}: descriptor truncated")
    try:
        header = json.loads(raw[16 : 16 + dlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed descriptor") from exc
    shapes = [tuple(b["shape"]) for b in header["buffers"]]
    need = 16 + dlen + 8 * sum(int(np.prod(s, dtype=np.int64)) for s in shapes) + 4
    if len(raw) < need:
        raise CheckpointTruncatedError(f"{path}: {len(raw)} bytes, expected {need}")
    if len(raw) > need:
        raise CheckpointFormatError(f"{path}: {len(raw) - need} trailing bytes")
    (crc,) = struct.unpack_from("<I", raw, need - 4)
    if zlib.crc32(raw[: need - 4]) != crc:
        raise CheckpointChecksumError(f"{path}: CRC mismatch")

    net = build_network(header["architecture"], seed=header["meta"].get("seed", 0))
    net.meta = dict(header["meta"])
    offset = 16 + dlen
    for (name, t), shape in zip(_named_buffers(net), shapes):
        if t.shape != shape:
            raise CheckpointFormatError(f"{path}: buffer {name} has shape {shape}, network wants {t.shape}")
        n = int(np.prod(shape, dtype=np.int64))
        t.data = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * n
    for g, gm in zip(net.gates, header["gates"]):
        g.granularity = gm["granularity"]
        g.mode = gm["mode"]
        g.epsilon = gm["epsilon"]
        g.frozen = gm["frozen"]
        g.values.requires_grad = not g.frozen
    return net
