"""Memorization-capacity bounds for two-hidden-layer networks and an exact
linear-piece counter along input rays."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .network import Activation, Dense, GatedNetwork, build_network, mlp_descriptor


class InteriorSolutionError(ValueError):
    """Closed-form allocation falls outside [0, 1]^2 or B <= d2."""


@dataclass
class CapacitySpec:
    d1: int
    d2: int
    p: int = 2
    alpha1: float = 1.0
    alpha2: float = 1.0
    budget: int | None = None
    n: int | None = None


def bound_full(d1: int, d2: int, p: int = 2) -> int:
    """Capacity upper bound of a dense two-hidden-layer net with p-piece activations."""
    return p * (p - 1) * d1 * d2 + (p - 1) * d2 + 2


def bound_snl(d1, d2, p, alpha1, alpha2) -> float:
    """Bound when only fractions alpha1, alpha2 of the units stay nonlinear."""
    return (alpha1 * alpha2 * d1 * d2 * p * (p - 1)
            + alpha2 * d2 * (p - 1)
            + alpha1 * (1 - alpha2) * d1 * d2 * (p - 1)
            + 2)


def bound_pruned(d1, d2, p, alpha1, alpha2) -> float:
    """Bound when the same fractions of units are removed outright."""
    return alpha1 * alpha2 * d1 * d2 * p * (p - 1) + alpha2 * d2 * (p - 1) + 2


def piece_bound(d1, d2, p, alpha1, alpha2) -> float:
    """Maximum number of linear pieces of t -> f(t u) for a linearized net."""
    return bound_snl(d1, d2, p, alpha1, alpha2) - 1


def optimal_alphas(d1: int, d2: int, budget: float) -> tuple[float, float]:
    """Retention fractions maximizing the ReLU (p=2) bound with alpha1*d1 + alpha2*d2 = budget."""
    if budget <= d2:
        raise InteriorSolutionError(f"interior-solution hypothesis violated: budget {budget} <= d2 {d2}")
    a1 = (budget + d2 - 1) / (2 * d1)
    a2 = (budget - d2 + 1) / (2 * d2)
    if not (0 <= a1 <= 1 and 0 <= a2 <= 1):
        raise InteriorSolutionError(
            f"interior-solution hypothesis violated: alphas ({a1}, {a2}) outside [0, 1]"
        )
    return a1, a2


def allocation_objective(k1: int, k2: int, d1: int, d2: int) -> float:
    """ReLU-network bound with k1 and k2 nonlinear units in the two layers."""
    return bound_snl(d1, d2, 2, k1 / d1, k2 / d2)


def _feasible_k1(d1: int, d2: int, budget: int) -> range:
    return range(max(0, budget - d2), min(d1, budget) + 1)


def grid_search_allocation(d1: int, d2: int, budget: int) -> tuple[int, int, float]:
    """Exhaustive search over integer splits k1 + k2 = budget."""
    ks = _feasible_k1(d1, d2, budget)
    if not len(ks):
        raise ValueError(f"budget {budget} infeasible for widths ({d1}, {d2})")
    best = max(ks, key=lambda k1: (allocation_objective(k1, budget - k1, d1, d2), -k1))
    return best, budget - best, allocation_objective(best, budget - best, d1, d2)


def rounded_allocation(d1: int, d2: int, budget: int) -> tuple[int, int]:
    """Round the closed-form split to the nearest feasible integer split.

    The unconstrained stationary point ``k1 = (budget + d2 - 1) / 2`` is
    clipped to the feasible segment first, which is where the concave
    objective peaks when the interior hypothesis fails.
    """
    ks = _feasible_k1(d1, d2, budget)
    if not len(ks):
        raise ValueError(f"budget {budget} infeasible for widths ({d1}, {d2})")
    k1_star = min(max((budget + d2 - 1) / 2, ks[0]), ks[-1])
    lo, hi = math.floor(k1_star), math.ceil(k1_star)
    k1 = max((lo, hi), key=lambda k: (allocation_objective(k, budget - k, d1, d2), -k))
    return k1, budget - k1


# ---------------------------------------------------------------------------
# exact piece counting along a ray


@dataclass
class RayPieceCount:
    direction: np.ndarray
    t_lo: float
    t_hi: float
    breakpoints: list[float] = field(default_factory=list)

    @property
    def pieces(self) -> int:
        return len(self.breakpoints) + 1

    def segments(self) -> list[tuple[float, float]]:
        edges = [self.t_lo, *self.breakpoints, self.t_hi]
        return list(zip(edges[:-1], edges[1:]))


def _two_layer_parts(net: GatedNetwork):
    dense = [l for l in net.layers if isinstance(l, Dense)]
    acts = [l for l in net.layers if isinstance(l, Activation)]
    if len(dense) != 3 or len(acts) != 2 or dense[-1].W.shape[1] != 1:
        raise ValueError("piece counting needs a two-hidden-layer dense net with scalar output")

    def gate(act):
        if act.gate is None:
            return np.ones(act_width(act)), "identity"
        return act.gate.values.data.reshape(-1), act.gate.mode

    def act_width(act):
        i = net.layers.index(act)
        return net.layers[i - 1].W.shape[1]

    (c1, m1), (c2, m2) = gate(acts[0]), gate(acts[1])
    return dense, (c1, m1), (c2, m2)


def _act(z, c, mode):
    r = np.maximum(z, 0.0)
    return c * r + (1.0 - c) * z if mode == "identity" else c * r


def _roots(slope: np.ndarray, icept: np.ndarray, lo: float, hi: float, kinked: np.ndarray) -> list[float]:
    out = []
    for s, b, k in zip(slope, icept, kinked):
        if not k or s == 0.0:
            continue
        t = -b / s + 0.0  # normalise -0.0
        if lo < t < hi:
            out.append(float(t))
    return out


def _dedupe(ts: list[float], scale: float) -> list[float]:
    ts = sorted(ts)
    out: list[float] = []
    for t in ts:
        if not out or t - out[-1] > 1e-12 * max(1.0, scale):
            out.append(t)
    return out


def count_pieces_ray(net: GatedNetwork, u, domain: tuple[float, float] = (-10.0, 10.0)) -> RayPieceCount:
    """Breakpoints of t -> net(t u) on ``domain``, solved exactly.

    A unit contributes a kink wherever its pre-activation crosses zero and
    its gate is nonzero. Layer-2 pre-activations are affine on each
    layer-1 segment, so their crossings are solved per segment.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if not np.any(u):
        raise ValueError("direction must be nonzero")
    lo, hi = map(float, domain)
    if not lo < hi:
        raise ValueError("empty domain")
    (L1, L2, _), (c1, m1), (c2, m2) = _two_layer_parts(net)
    W1, b1, W2, b2 = L1.W.data, L1.b.data, L2.W.data, L2.b.data
    scale = max(abs(lo), abs(hi))

    s1 = u @ W1
    k1 = c1 != 0
    bp1 = _dedupe(_roots(s1, b1, lo, hi, k1), scale)
    bps = list(bp1)
    edges = [lo, *bp1, hi]
    k2 = c2 != 0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        # layer-1 output is affine on (a, b): slope via the active pattern at mid
        z1_mid = mid * s1 + b1
        if m1 == "identity":
            d1 = np.where(z1_mid > 0, 1.0, 1.0 - c1)
        else:
            d1 = np.where(z1_mid > 0, c1, 0.0)
        a1_slope = d1 * s1
        a1_mid = _act(z1_mid, c1, m1)
        z2_slope = a1_slope @ W2
        z2_mid = a1_mid @ W2 + b2
        z2_icept = z2_mid - mid * z2_slope
        bps += _roots(z2_slope, z2_icept, a, b, k2)
    return RayPieceCount(u, lo, hi, _dedupe(bps, scale))


def ray_values(net: GatedNetwork, u, ts) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64).reshape(1, -1)
    ts = np.asarray(ts, dtype=np.float64).reshape(-1, 1)
    return net.predict_logits(ts * u)[:, 0]


def secant_residual(net: GatedNetwork, rc: RayPieceCount) -> float:
    """Largest relative gap between f at a piece midpoint and the piece's secant."""
    worst = 0.0
    for a, b in rc.segments():
        fa, fm, fb = ray_values(net, rc.direction, [a, 0.5 * (a + b), b])
        worst = max(worst, abs(fm - 0.5 * (fa + fb)) / max(1.0, abs(fa), abs(fb)))
    return worst


def random_gated_mlp(d_in: int, d1: int, d2: int, k1: int, k2: int,
                     rng: np.random.Generator) -> GatedNetwork:
    """Random net with exactly k1 / k2 nonlinear units (random positions)."""
    net = build_network(mlp_descriptor([d_in, d1, d2, 1]), seed=int(rng.integers(2**31)))
    for layer in net.layers:
        if isinstance(layer, Dense):
            layer.b.data = rng.normal(size=layer.b.shape)
    for gate, k, d in zip(net.gates, (k1, k2), (d1, d2)):
        c = np.zeros(d)
        c[rng.choice(d, size=k, replace=False)] = 1.0
        gate.values.data = c
    return net


def sawtooth_net() -> GatedNetwork:
    """d1 = d2 = 2 net whose ray restriction is a composed tent map."""
    net = build_network(mlp_descriptor([1, 2, 2, 1]), seed=0)
    L1, L2, L3 = [l for l in net.layers if isinstance(l, Dense)]
    # tent(t) = 2 relu(t) - 4 relu(t - 1/2)
    L1.W.data = np.array([[1.0, 1.0]])
    L1.b.data = np.array([0.0, -0.5])
    L2.W.data = np.array([[2.0, 2.0], [-4.0, -4.0]])
    L2.b.data = np.array([0.0, -0.5])
    L3.W.data = np.array([[2.0], [-4.0]])
    L3.b.data = np.zeros(1)
    return net


# ---------------------------------------------------------------------------
# falsification harness


@dataclass
class VerificationRow:
    trial: int
    d1: int
    d2: int
    alpha1: float
    alpha2: float
    pieces: int
    bound: float
    secant: float


@dataclass
class VerificationReport:
    seed: int
    rows: list[VerificationRow] = field(default_factory=list)
    secant_tol: float = 1e-9

    @property
    def violations(self) -> list[VerificationRow]:
        return [r for r in self.rows if r.pieces > r.bound]

    @property
    def inexact(self) -> list[VerificationRow]:
        return [r for r in self.rows if r.secant > self.secant_tol]

    @property
    def max_ratio(self) -> float:
        return max((r.pieces / r.bound for r in self.rows), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.inexact

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema: capacity-verify/1\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "d1", "d2", "alpha1", "alpha2", "pieces", "bound"])
        for r in self.rows:
            w.writerow([r.trial, r.d1, r.d2, repr(r.alpha1), repr(r.alpha2), r.pieces, repr(r.bound)])
        return buf.getvalue()


def verify_capacity_bounds(trials: int = 500, d_range: tuple[int, int] = (1, 8),
                           alpha: tuple[float, float] | None = None, seed: int = 0,
                           d_in: int = 3, domain: tuple[float, float] = (-10.0, 10.0)) -> VerificationReport:
    """Check measured ray pieces against the piece bound on random small nets.

    ``alpha`` fixes the retention fractions (rounded down to whole units);
    ``None`` draws the number of nonlinear units per layer uniformly.
    """
    rng = np.random.default_rng(seed)
    report = VerificationReport(seed)
    for trial in range(trials):
        d1, d2 = (int(v) for v in rng.integers(d_range[0], d_range[1] + 1, size=2))
        if alpha is None:
            k1, k2 = int(rng.integers(0, d1 + 1)), int(rng.integers(0, d2 + 1))
        else:
            k1, k2 = int(np.floor(alpha[0] * d1)), int(np.floor(alpha[1] * d2))
        net = random_gated_mlp(d_in, d1, d2, k1, k2, rng)
        u = rng.normal(size=d_in)
        rc = count_pieces_ray(net, u, domain)
        a1, a2 = k1 / d1, k2 / d2
        report.rows.append(VerificationRow(trial, d1, d2, a1, a2, rc.pieces,
                                           piece_bound(d1, d2, 2, a1, a2), secant_residual(net, rc)))
    return report
