"""Online private-inference latency estimates from ReLU counts."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_T_PER_1K = 0.021  # seconds per 1000 garbled-circuit ReLUs


@dataclass(frozen=True)
class LatencyModel:
    t_per_1k: float = DEFAULT_T_PER_1K
    linear_time: float = 0.0

    def __post_init__(self):
        if self.t_per_1k < 0 or self.linear_time < 0:
            raise ValueError("latency model parameters must be nonnegative")


def estimate_online_latency(relu_count: float, model: LatencyModel = LatencyModel()) -> float:
    """Plaintext linear time plus the garbled-circuit cost of ``relu_count`` ReLUs."""
    if relu_count < 0:
        raise ValueError("relu_count must be nonnegative")
    return model.linear_time + (relu_count / 1000) * model.t_per_1k


def fit_per_relu_cost(points: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Unweighted least-squares line through (relu_count, latency) points.

    Returns (seconds per ReLU, intercept seconds).
    """
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("need at least two (relu_count, latency) points")
    x, y = pts[:, 0], pts[:, 1]
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("degenerate fit: all ReLU counts are equal")
    slope = float(dx @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


def backsolve_linear_time(relu_count: float, latency: float,
                          t_per_1k: float = DEFAULT_T_PER_1K) -> float:
    """Linear-layer time implied by one reported (ReLU count, latency) pair."""
    return latency - (relu_count / 1000) * t_per_1k


def accuracy_per_relu(accuracy_percent: float, relu_count_k: float) -> float:
    if relu_count_k <= 0:
        raise ValueError("ReLU count must be positive")
    return accuracy_percent / relu_count_k


def measure_linear_time(net, input_shape: Sequence[int], repeats: int = 100, seed: int = 0) -> float:
    """Median wall-clock seconds of one batch-1 plaintext forward pass.

    Wall-clock timings are not reproducible; callers that need
    byte-identical outputs should pass a fixed linear time instead.
    """
    x = np.random.default_rng(seed).standard_normal((1, *input_shape))
    net(x)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        net(x)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def read_points_csv(text: str) -> list[tuple[float, float]]:
    """Parse ``relu_count,latency`` rows; a header row and ``#`` comments are skipped."""
    rows = []
    for row in csv.reader(line for line in io.StringIO(text) if not line.startswith("#")):
        if not row:
            continue
        try:
            rows.append((float(row[0]), float(row[1])))
        except ValueError:
            if rows:
                raise
    return rows


def estimates_csv(counts: Iterable[float], model: LatencyModel) -> str:
    buf = io.StringIO()
    buf.write("# schema: latency-estimate/1\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["relu_count", "latency_s"])
    for c in counts:
        w.writerow([c, repr(estimate_online_latency(c, model))])
    return buf.getvalue()
