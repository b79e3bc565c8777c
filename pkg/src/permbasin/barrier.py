"""Loss barriers along the straight line between two networks.

The barrier is the largest excess of the path loss over the straight line joining the
endpoint losses, maximized over an alpha grid (alpha=1 is ``net1``).
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import runtime
from .netcore import EvalResult, Network, ShapeError, average, blend, evaluate

LOSS = "loss"
ERROR = "error"
METRICS = (LOSS, ERROR)

PROFILE_COLUMNS = ("alpha", "loss", "error", "baseline", "excess")


class SurrogateGapWarning(UserWarning):
    """The midpoint barrier and the full-grid barrier disagree by more than the tolerance."""


def _metric_value(res: EvalResult, metric: str) -> float:
    if metric == LOSS:
        return res.loss
    if metric == ERROR:
        return res.error
    raise ValueError(f"unknown metric {metric!r}")


@dataclass(frozen=True, eq=False)
class BarrierProfile:
    alphas: np.ndarray
    losses: np.ndarray
    errors: np.ndarray
    metric: str = LOSS
    split: str = "train"

    @property
    def values(self) -> np.ndarray:
        return self.losses if self.metric == LOSS else self.errors

    @property
    def endpoint_l1(self) -> float:
        return float(self.values[-1])

    @property
    def endpoint_l0(self) -> float:
        return float(self.values[0])

    def baseline(self, metric: str | None = None) -> np.ndarray:
        vals = self.values if metric is None else (self.losses if metric == LOSS else self.errors)
        return _baseline(self.alphas, vals[-1], vals[0])

    def excess(self, metric: str | None = None) -> np.ndarray:
        vals = self.values if metric is None else (self.losses if metric == LOSS else self.errors)
        return vals - self.baseline(metric)

    def reversed(self) -> "BarrierProfile":
        return BarrierProfile(self.alphas, self.losses[::-1].copy(), self.errors[::-1].copy(),
                              self.metric, self.split)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(PROFILE_COLUMNS)
        base, exc = self.baseline(), self.excess()
        for a, lo, er, b, e in zip(self.alphas, self.losses, self.errors, base, exc):
            writer.writerow([repr(float(a)), repr(float(lo)), repr(float(er)),
                             repr(float(b)), repr(float(e))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text


def _grid_weights(grid_size: int) -> list[tuple[float, float]]:
    # (w1, w2) with both weights computed from integers, so the grid is exactly
    # symmetric under swapping the two networks
    n = grid_size - 1
    return [(k / n, (n - k) / n) for k in range(grid_size)]


def _baseline(alphas: np.ndarray, l1: float, l0: float) -> np.ndarray:
    # l0 + alpha * (l1 - l0) is exactly l0 everywhere when the endpoints tie
    n = len(alphas) - 1
    k = np.arange(len(alphas))
    return l0 + (k / n) * (l1 - l0)


def loss_profile(net1: Network, net2: Network, dataset, grid_size: int = 11, metric: str = LOSS,
                 split: str = "train", canonical: bool = False) -> BarrierProfile:
    """Evaluate the interpolated network at ``grid_size`` evenly spaced alphas in [0, 1]."""
    if grid_size < 3 or grid_size % 2 == 0:
        raise ValueError("grid_size must be odd and >= 3 so that alpha=0.5 is on the grid")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if not net1.same_architecture(net2):
        raise ShapeError("networks have different architectures")
    weights = _grid_weights(grid_size)
    results = runtime.pmap(lambda w: evaluate(blend(net1, net2, *w), dataset, split, canonical), weights)
    alphas = np.array([w1 for w1, _ in weights])
    return BarrierProfile(alphas, np.array([r.loss for r in results]),
                          np.array([r.error for r in results]), metric, split)


def barrier_value(profile: BarrierProfile) -> float:
    """max over the grid of value(alpha) - (alpha*L(net1) + (1-alpha)*L(net2))."""
    return float(np.max(profile.excess()))


def midpoint_stats(net1: Network, net2: Network, dataset, split: str = "train",
                   endpoints: tuple[EvalResult, EvalResult] | None = None,
                   canonical: bool = False) -> dict[str, float]:
    """Midpoint barrier for both metrics; ``endpoints`` = (eval(net1), eval(net2)) if known."""
    if endpoints is None:
        endpoints = (evaluate(net1, dataset, split, canonical), evaluate(net2, dataset, split, canonical))
    e1, e2 = endpoints
    mid = evaluate(blend(net1, net2, 0.5, 0.5), dataset, split, canonical)
    return {
        LOSS: mid.loss - 0.5 * (e1.loss + e2.loss),
        ERROR: mid.error - 0.5 * (e1.error + e2.error),
    }


def midpoint_barrier(net1: Network, net2: Network, dataset, metric: str = LOSS, split: str = "train",
                     endpoints: tuple[EvalResult, EvalResult] | None = None, check: bool = False,
                     tol: float = 1e-3, canonical: bool = False) -> float:
    """Barrier evaluated at alpha=1/2 only, a cheap surrogate for the grid supremum.

    With ``check=True`` the 11-point grid barrier is also computed and a
    :class:`SurrogateGapWarning` is emitted if the two differ by more than ``tol``.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    value = midpoint_stats(net1, net2, dataset, split, endpoints, canonical)[metric]
    if check:
        full = barrier_value(loss_profile(net1, net2, dataset, 11, metric, split, canonical))
        if abs(full - value) > tol:
            warnings.warn(f"midpoint barrier {value:.6g} vs grid barrier {full:.6g}",
                          SurrogateGapWarning, stacklevel=2)
    return value


def pairwise_barriers(nets: Sequence[Network], dataset, metric: str = LOSS, split: str = "train",
                      full_grid: bool = False, grid_size: int = 11) -> np.ndarray:
    """Symmetric matrix of barriers between all pairs; zero diagonal."""
    nets = list(nets)
    if len(nets) < 2:
        raise ValueError("need at least two networks")
    for other in nets[1:]:
        if not nets[0].same_architecture(other):
            raise ShapeError("networks have different architectures")
    n = len(nets)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if full_grid:
        def one(ij):
            i, j = ij
            return barrier_value(loss_profile(nets[i], nets[j], dataset, grid_size, metric, split))
    else:
        ends = runtime.pmap(lambda net: evaluate(net, dataset, split), nets)

        def one(ij):
            i, j = ij
            return midpoint_stats(nets[i], nets[j], dataset, split, (ends[i], ends[j]))[metric]
    values = runtime.pmap(one, pairs)
    out = np.zeros((n, n))
    for (i, j), v in zip(pairs, values):
        out[i, j] = out[j, i] = v
    return out


def indirect_barrier(matrix: np.ndarray, i: int, j: int) -> float:
    """min over intermediates k not in {i, j} of max(B[i, k], B[k, j])."""
    m = np.asarray(matrix)
    n = m.shape[0]
    if n < 3:
        raise ValueError("indirect barriers need at least three networks")
    if i == j:
        raise ValueError("i and j must differ")
    ks = [k for k in range(n) if k != i and k != j]
    return float(np.min(np.maximum(m[i, ks], m[ks, j])))


def indirect_matrix(matrix: np.ndarray) -> np.ndarray:
    n = matrix.shape[0]
    out = np.zeros_like(matrix, dtype=float)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = indirect_barrier(matrix, i, j)
    return out


def midpoint_of_average(net1: Network, net2: Network, dataset, split: str = "train") -> EvalResult:
    """Path value at alpha=1/2 computed through :func:`average` (consistency check helper)."""
    return evaluate(average([net1, net2]), dataset, split)
