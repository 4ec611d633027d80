"""Gated networks: construction, gate semantics and accounting, checkpoints."""

import struct
import zlib

import numpy as np
import pytest

from snl.network import (
    ArchitectureError,
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    GateStateError,
    binarize_gates,
    build_network,
    cnn_descriptor,
    freeze_gates,
    gate_hash,
    is_binary,
    load_checkpoint,
    mlp_descriptor,
    relu_count,
    save_checkpoint,
    set_gate_mode,
)
from snl.tensor import ShapeError, Tape, Tensor, gated_activation, sum_all


def _set_gates(net, value):
    for g in net.gates:
        g.values.data[...] = value
    return net


def _plain_relu_forward(net, x):
    """Reference forward pass written directly in numpy."""
    h = x
    for layer in net.layers:
        kind = type(layer).__name__
        if kind == "Dense":
            h = h @ layer.W.data + layer.b.data
        elif kind == "Conv":
            from scipy.signal import correlate
            n, cin, H, W = h.shape
            p, s = layer.padding, layer.stride
            hp = np.pad(h, ((0, 0), (0, 0), (p, p), (p, p)))
            out = []
            for i in range(n):
                maps = []
                for o in range(layer.K.shape[0]):
                    full = correlate(hp[i], layer.K.data[o], mode="valid")[0]
                    maps.append(full[::s, ::s] + layer.b.data[o])
                out.append(maps)
            h = np.array(out)
        elif kind == "Flatten":
            h = h.reshape(len(h), -1)
        elif kind == "Activation":
            h = np.maximum(h, 0.0)
    return h


class TestBuild:
    def test_mlp_gate_total(self):
        net = build_network(mlp_descriptor([2, 16, 16, 2]))
        assert net.total_gates == 32
        assert relu_count(net) == 32

    def test_cnn_first_activation_ungated(self):
        net = build_network(cnn_descriptor((1, 8, 8), [4, 8], 2, first_act="relu"))
        assert net.total_gates == 8 * 8 * 8
        assert net.fixed_relus == 4 * 8 * 8

    def test_cnn_per_channel(self):
        net = build_network(cnn_descriptor((1, 8, 8), [4, 8], 2, granularity="channel"))
        assert net.total_gates == 8
        # budget unit is ReLU operations, so each channel stands for 64 of them
        assert relu_count(net) == 512

    def test_gates_start_at_one(self):
        net = build_network(cnn_descriptor((1, 8, 8), [2, 3], 2, first_act="gated"))
        assert all(np.all(g.values.data == 1.0) for g in net.gates)

    def test_non_integer_conv_output(self):
        with pytest.raises(ArchitectureError):
            build_network(cnn_descriptor((1, 8, 8), [2, 2], 2, strides=[2, 1]))

    def test_activation_must_follow_linear(self):
        desc = {"input_shape": [2], "layers": [{"type": "act"}, {"type": "dense", "out": 2}]}
        with pytest.raises(ArchitectureError):
            build_network(desc)

    def test_dense_on_image_rejected(self):
        desc = {"input_shape": [1, 4, 4], "layers": [{"type": "dense", "out": 2}]}
        with pytest.raises(ArchitectureError):
            build_network(desc)

    def test_residual_shape_mismatch(self):
        desc = {"input_shape": [4], "layers": [
            {"type": "dense", "out": 4}, {"type": "act"},
            {"type": "residual", "body": [{"type": "dense", "out": 3}]}, {"type": "dense", "out": 2}]}
        with pytest.raises(ArchitectureError):
            build_network(desc)

    def test_residual_forward(self):
        desc = {"input_shape": [4], "layers": [
            {"type": "dense", "out": 4}, {"type": "act"},
            {"type": "residual", "body": [{"type": "dense", "out": 4}, {"type": "act"}]},
            {"type": "dense", "out": 2}]}
        net = build_network(desc, seed=3)
        assert net.total_gates == 8
        assert net(np.ones((5, 4))).shape == (5, 2)

    def test_seeded_init_is_deterministic(self):
        a = build_network(mlp_descriptor([3, 8, 2]), seed=5)
        b = build_network(mlp_descriptor([3, 8, 2]), seed=5)
        for p, q in zip(a.weight_params(), b.weight_params()):
            np.testing.assert_array_equal(p.data, q.data)


class TestGateSemantics:
    def test_examples(self):
        z = Tensor([[1.0, -2.0]])
        np.testing.assert_array_equal(gated_activation(z, Tensor([1.0, 1.0])).data, [[1.0, 0.0]])
        np.testing.assert_array_equal(gated_activation(z, Tensor([0.0, 0.0])).data, [[1.0, -2.0]])
        np.testing.assert_array_equal(gated_activation(Tensor([[-3.0]]), Tensor([0.5])).data, [[-1.5]])
        np.testing.assert_array_equal(gated_activation(Tensor([[-3.0]]), Tensor([0.5]), "zero-out").data, [[0.0]])

    @pytest.mark.parametrize("mode,expected", [("identity", 3.0), ("zero-out", 0.0)])
    def test_gate_gradient(self, mode, expected):
        c = Tensor([0.5], True)
        with Tape() as tape:
            out = sum_all(gated_activation(Tensor([[-3.0]]), c, mode))
        tape.backward(out, [c])
        assert c.grad[0] == expected

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            gated_activation(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))

    @pytest.mark.parametrize("desc", [
        mlp_descriptor([3, 12, 10, 4]),
        cnn_descriptor((1, 6, 6), [3, 4], 3, first_act="gated"),
        cnn_descriptor((2, 5, 5), [3, 4], 2, strides=[1, 2], granularity="channel"),
    ])
    def test_all_ones_equals_plain_relu(self, desc):
        net = build_network(desc, seed=1)
        x = np.random.default_rng(0).standard_normal((100, *desc["input_shape"]))
        got = net(x).data
        ref = _plain_relu_forward(net, x)
        np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)
        # bit-exact against the same network with plain ReLU layers
        plain = net.copy()
        for layer in plain.gated_layers():
            layer.gate = None
        np.testing.assert_array_equal(got, plain(x).data)

    @pytest.mark.parametrize("desc", [
        mlp_descriptor([3, 12, 10, 4]),
        cnn_descriptor((1, 6, 6), [3, 4], 3, first_act="gated"),
    ])
    def test_all_zeros_collapses_to_affine(self, desc):
        net = _set_gates(build_network(desc, seed=2), 0.0)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((20, *desc["input_shape"]))
        y = rng.standard_normal((20, *desc["input_shape"]))
        f = lambda v: net(v).data
        np.testing.assert_allclose(f(x + y) - f(x) - f(y) + f(np.zeros_like(x)), 0.0, atol=1e-9)

    def test_frozen_forward_unchanged(self):
        net = build_network(mlp_descriptor([2, 8, 2]), seed=4)
        net.gates[0].values.data[:4] = 0.0
        x = np.random.default_rng(2).standard_normal((10, 2))
        before = net(x).data
        freeze_gates(net)
        np.testing.assert_array_equal(net(x).data, before)
        assert net.gate_params() == []

    def test_set_gate_mode(self):
        net = set_gate_mode(build_network(mlp_descriptor([2, 4, 2])), "zero-out")
        assert all(g.mode == "zero-out" for g in net.gates)
        with pytest.raises(ValueError):
            set_gate_mode(net, "bogus")


class TestGateAccounting:
    def test_fresh_count(self):
        net = build_network(mlp_descriptor([2, 16, 16, 2]))
        assert relu_count(net, 0.01) == net.total_gates

    def test_all_below_eps(self):
        net = _set_gates(build_network(mlp_descriptor([2, 16, 16, 2])), 0.005)
        assert relu_count(net, 0.01) == 0

    def test_strict_inequality(self):
        net = build_network(mlp_descriptor([2, 3, 2]))
        net.gates[0].values.data[:] = [0.5, 0.01, 0.011]
        assert relu_count(net, 0.01) == 2

    def test_count_monotone_in_eps(self):
        net = build_network(mlp_descriptor([2, 50, 2]))
        net.gates[0].values.data[:] = np.random.default_rng(3).uniform(-0.2, 0.3, 50)
        counts = [relu_count(net, e) for e in np.linspace(-0.3, 0.4, 30)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_binarize_examples(self):
        net = build_network(mlp_descriptor([2, 3, 2]))
        net.gates[0].values.data[:] = [0.9, 0.001, 0.02]
        binarize_gates(net, 0.01)
        np.testing.assert_array_equal(net.gates[0].values.data, [1.0, 0.0, 1.0])
        binarize_gates(net, 0.01)
        np.testing.assert_array_equal(net.gates[0].values.data, [1.0, 0.0, 1.0])
        net.gates[0].values.data[:] = 0.01
        binarize_gates(net, 0.01)
        np.testing.assert_array_equal(net.gates[0].values.data, 0.0)

    def test_binarize_negative_gates(self):
        net = build_network(mlp_descriptor([2, 2, 2]))
        net.gates[0].values.data[:] = [-0.5, 0.5]
        binarize_gates(net, 0.01)
        np.testing.assert_array_equal(net.gates[0].values.data, [0.0, 1.0])

    def test_freeze_requires_binary(self):
        net = build_network(mlp_descriptor([2, 3, 2]))
        net.gates[0].values.data[:] = [0.5, 1.0, 0.0]
        assert not is_binary(net)
        with pytest.raises(GateStateError):
            freeze_gates(net)

    def test_binarize_after_freeze_rejected(self):
        net = freeze_gates(build_network(mlp_descriptor([2, 3, 2])))
        with pytest.raises(GateStateError):
            binarize_gates(net)

    def test_gate_hash_tracks_values(self):
        net = build_network(mlp_descriptor([2, 3, 2]))
        h = gate_hash(net)
        assert gate_hash(net.copy()) == h
        net.gates[0].values.data[0] = 0.0
        assert gate_hash(net) != h


class TestCheckpoint:
    @pytest.fixture
    def net(self):
        net = build_network(cnn_descriptor((1, 5, 5), [2, 3], 2, first_act="gated"), seed=7)
        net.gates[1].values.data[0] = 0.0
        net.meta.update(epoch=12, **{"lambda": 3.5e-4})
        return freeze_gates(net)

    def test_round_trip_bit_exact(self, net, tmp_path):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        back = load_checkpoint(path)
        x = np.random.default_rng(0).standard_normal((16, 1, 5, 5))
        np.testing.assert_array_equal(back(x).data, net(x).data)
        assert [g.frozen for g in back.gates] == [True, True]
        assert back.meta["epoch"] == 12 and back.meta["lambda"] == 3.5e-4
        assert back.descriptor == net.descriptor

    def test_preserves_mode_and_eps(self, tmp_path):
        net = set_gate_mode(build_network(mlp_descriptor([2, 4, 2]), seed=1), "zero-out")
        net.gates[0].epsilon = 0.05
        save_checkpoint(net, tmp_path / "a.ckpt")
        g = load_checkpoint(tmp_path / "a.ckpt").gates[0]
        assert (g.mode, g.epsilon, g.frozen) == ("zero-out", 0.05, False)

    def test_bad_magic(self, net, tmp_path):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_version_mismatch(self, net, tmp_path):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [4, 14, -9])
    def test_truncated(self, net, tmp_path, keep):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(CheckpointTruncatedError if keep > 8 or keep < 0 else CheckpointFormatError):
            load_checkpoint(path)

    def test_checksum(self, net, tmp_path):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        raw = bytearray(path.read_bytes())
        raw[-20] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointChecksumError):
            load_checkpoint(path)

    def test_trailing_crc_covers_body(self, net, tmp_path):
        path = tmp_path / "n.ckpt"
        save_checkpoint(net, path)
        raw = path.read_bytes()
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])
