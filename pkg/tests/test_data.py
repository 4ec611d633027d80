"""Synthetic datasets and the binary dataset container."""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from snl.data import (
    DATA_MAGIC,
    ClassCountError,
    DatasetError,
    DatasetFormatError,
    DatasetSpec,
    load_dataset,
    read_container,
    write_container,
)


class TestSynthetic:
    def test_deterministic(self):
        a = load_dataset(DatasetSpec("two-gaussians", n=1000, noise=0.3, seed=7))
        b = load_dataset({"kind": "two-gaussians", "n": 1000, "noise": 0.3, "seed": 7})
        for f in ("x_train", "y_train", "x_test", "y_test"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_seed_changes_data(self):
        a = load_dataset(DatasetSpec("two-gaussians", seed=1))
        b = load_dataset(DatasetSpec("two-gaussians", seed=2))
        assert not np.array_equal(a.x_train, b.x_train)

    @pytest.mark.parametrize("kind", ["two-gaussians", "concentric-rings", "xor-grid"])
    def test_split_and_balance(self, kind):
        d = load_dataset(DatasetSpec(kind, n=800, test_fraction=0.25))
        assert len(d.y_test) == 200 and len(d.y_train) == 600
        assert d.n_classes == 2
        assert np.bincount(np.concatenate([d.y_train, d.y_test])).tolist() == [400, 400]

    @pytest.mark.parametrize("grid", [2, 4, 6])
    def test_xor_grid_not_linearly_separable(self, grid):
        d = load_dataset(DatasetSpec("xor-grid", n=2000, noise=0.05, grid=grid, seed=3))
        acc = LogisticRegression().fit(d.x_train, d.y_train).score(d.x_test, d.y_test)
        assert acc <= 0.75

    def test_xor_grid_in_unit_box(self):
        d = load_dataset(DatasetSpec("xor-grid", n=400, noise=0.0, grid=5))
        assert np.abs(d.x_train).max() == pytest.approx(1.0)

    def test_rings_radii(self):
        d = load_dataset(DatasetSpec("concentric-rings", n=400, noise=0.0))
        r = np.linalg.norm(d.x_train, axis=1)
        np.testing.assert_allclose(r, np.where(d.y_train == 0, 1.0, 2.0))

    @pytest.mark.parametrize("k", [2, 4])
    def test_bars(self, k):
        d = load_dataset(DatasetSpec("bars", n=200, noise=0.0, image_size=6, n_classes=k))
        assert d.input_shape == (1, 6, 6) and d.n_classes == k
        # every noiseless image carries exactly one bar of six pixels
        np.testing.assert_array_equal(np.abs(d.x_train).sum(axis=(1, 2, 3)), 6.0)

    def test_bars_not_linearly_separable(self):
        d = load_dataset(DatasetSpec("bars", n=1200, noise=0.5, image_size=9, n_classes=4, seed=1))
        flat = lambda x: x.reshape(len(x), -1)
        acc = LogisticRegression(max_iter=2000).fit(flat(d.x_train), d.y_train).score(flat(d.x_test), d.y_test)
        assert acc < 0.4

    @pytest.mark.parametrize("spec", [DatasetSpec("moons"), DatasetSpec(n=2), DatasetSpec(test_fraction=1.0),
                                      DatasetSpec("xor-grid", grid=1), DatasetSpec("bars", n_classes=3)])
    def test_invalid(self, spec):
        with pytest.raises(DatasetError):
            load_dataset(spec)

    def test_class_count_mismatch(self):
        with pytest.raises(ClassCountError):
            load_dataset(DatasetSpec("two-gaussians", n_classes=3))


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((37, 2, 3, 3))
        y = rng.integers(0, 5, 37)
        write_container(tmp_path / "d.bin", x, y, 5)
        x2, y2, k = read_container(tmp_path / "d.bin")
        assert x2.tobytes() == x.tobytes()
        np.testing.assert_array_equal(y2, y)
        assert k == 5

    def test_layout(self, tmp_path):
        write_container(tmp_path / "d.bin", np.ones((2, 3)), [0, 1], 2)
        raw = (tmp_path / "d.bin").read_bytes()
        assert raw[:8] == DATA_MAGIC
        assert len(raw) == 8 + 4 + 4 + 4 + 4 + 2 * 3 * 8 + 2 * 4

    def test_file_dataset(self, tmp_path):
        rng = np.random.default_rng(1)
        write_container(tmp_path / "d.bin", rng.standard_normal((40, 3)), np.arange(40) % 3, 3)
        d = load_dataset(DatasetSpec("file", path=str(tmp_path / "d.bin"), test_fraction=0.25))
        assert d.n_classes == 3 and len(d.y_test) == 10
        with pytest.raises(ClassCountError):
            load_dataset(DatasetSpec("file", path=str(tmp_path / "d.bin"), n_classes=4))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "d.bin").write_bytes(b"NOTDATA!" + bytes(20))
        with pytest.raises(DatasetFormatError):
            read_container(tmp_path / "d.bin")

    def test_truncated(self, tmp_path):
        write_container(tmp_path / "d.bin", np.ones((4, 2)), [0, 1, 0, 1], 2)
        raw = (tmp_path / "d.bin").read_bytes()
        for cut in (10, len(raw) - 1):
            (tmp_path / "t.bin").write_bytes(raw[:cut])
            with pytest.raises(DatasetFormatError):
                read_container(tmp_path / "t.bin")

    def test_label_out_of_range(self, tmp_path):
        with pytest.raises(ClassCountError):
            write_container(tmp_path / "d.bin", np.ones((2, 2)), [0, 2], 2)
        write_container(tmp_path / "d.bin", np.ones((2, 2)), [0, 1], 2)
        raw = bytearray((tmp_path / "d.bin").read_bytes())
        raw[-4:] = (7).to_bytes(4, "little")
        (tmp_path / "d.bin").write_bytes(bytes(raw))
        with pytest.raises(ClassCountError):
            read_container(tmp_path / "d.bin")

    def test_missing_path(self):
        with pytest.raises(DatasetError):
            load_dataset(DatasetSpec("file"))
