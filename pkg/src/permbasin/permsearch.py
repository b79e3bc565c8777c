"""Searching the permutation group for alignments that lower the barrier.

Methods: simulated annealing over several models (pairwise-barrier or averaged-model
energy), the two-model reduced variant, functional-difference greedy matching, grid-bucket
matching of weight rows, and exhaustive enumeration for tiny widths.

Permutations returned by every method act on the *first* network so that
``apply(net1, perm)`` is aligned to ``net2``.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import permalg
from .barrier import LOSS, midpoint_stats
from .netcore import Network, ShapeError, average, evaluate, hidden_activations
from .permalg import Permutation

SA1 = "sa1"
SA2 = "sa2"

CURVATURE_FLOOR = 1e-8
BRUTE_FORCE_LIMIT = 8


class WidthLimitError(ValueError):
    pass


@dataclass(frozen=True)
class SAConfig:
    steps: int = 50_000
    t_max: float = 25_000.0
    t_min: float = 2.5
    swaps_per_layer: int = 1
    objective: str = SA1
    n_models: int = 5
    seed: int = 0
    pin_first: bool = True
    metric: str = LOSS
    split: str = "train"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (self.t_max > self.t_min > 0):
            raise ValueError("need t_max > t_min > 0")
        if self.swaps_per_layer < 1:
            raise ValueError("swaps_per_layer must be >= 1")
        if self.objective not in (SA1, SA2):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.n_models < 2:
            raise ValueError("n_models must be >= 2")


@dataclass
class SearchResult:
    perms: list[Permutation]
    energy_trace: list[tuple[int, float]]
    initial_energy: float
    final_energy: float
    evaluations: int
    seed: int | None
    method: str = ""
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "initial_energy": self.initial_energy,
            "final_energy": self.final_energy,
            "evaluations": self.evaluations,
            "perms": [p.to_lists() for p in self.perms],
            "energy_trace": [[s, e] for s, e in self.energy_trace],
            "extra": self.extra,
        }, indent=2, sort_keys=True)

    def trace_csv(self) -> str:
        lines = ["step,best_energy"]
        lines += [f"{s},{e!r}" for s, e in self.energy_trace]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# annealing


def temperature(step: int, cfg: SAConfig) -> float:
    """Exponential cooling from ``t_max`` at step 0 to ``t_min`` at the last step."""
    if cfg.steps <= 1:
        return cfg.t_max
    return cfg.t_max * (cfg.t_min / cfg.t_max) ** (step / (cfg.steps - 1))


def accept(delta_energy: float, T: float, rng: np.random.Generator) -> bool:
    """Metropolis rule: improvements and ties always, otherwise with prob exp(-dE/T)."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    if delta_energy <= 0:
        return True
    return bool(rng.random() < math.exp(-delta_energy / T))


def anneal(energy: Callable[[list[Permutation]], float], initial: list[Permutation],
           cfg: SAConfig, frozen: Sequence[bool] = ()) -> SearchResult:
    """Generic annealing loop over a list of permutations; tracks the best state ever seen."""
    rng = np.random.default_rng(cfg.seed)
    frozen = list(frozen) + [False] * (len(initial) - len(frozen))
    state = list(initial)
    e = energy(state)
    evaluations = 1
    best_state, best_e = list(state), e
    trace = [(0, best_e)]
    for step in range(cfg.steps):
        T = temperature(step, cfg)
        cand = [p if fz else permalg.transposition_move(p, cfg.swaps_per_layer, rng)
                for p, fz in zip(state, frozen)]
        ce = energy(cand)
        evaluations += 1
        if accept(ce - e, T, rng):
            state, e = cand, ce
            if e < best_e:
                best_state, best_e = list(state), e
                trace.append((step + 1, best_e))
    if trace[-1][0] != cfg.steps:
        trace.append((cfg.steps, best_e))
    return SearchResult(best_state, trace, trace[0][1], best_e, evaluations, cfg.seed,
                        config=asdict(cfg))


def _check_same(nets: Sequence[Network]) -> None:
    for other in nets[1:]:
        if not nets[0].same_architecture(other):
            raise ShapeError("networks have different architectures")


def multi_model_energy(nets: Sequence[Network], dataset, cfg: SAConfig):
    """Energy over permutations of ``nets``: mean pairwise midpoint barrier (SA1) or train
    error of the averaged permuted models (SA2).

    Each midpoint term is floored at 0, the value the endpoints alone already give, so a
    blend that beats both endpoints counts as no barrier rather than a reward.
    """
    _check_same(nets)

    def sa1(perms):
        permuted = [permalg.apply(n, p) for n, p in zip(nets, perms)]
        # endpoints are re-evaluated on the permuted models so that exact alignment scores 0
        ends = [evaluate(n, dataset, cfg.split) for n in permuted]
        vals = [max(0.0, midpoint_stats(permuted[i], permuted[j], dataset, cfg.split,
                                        (ends[i], ends[j]))[cfg.metric])
                for i, j in itertools.combinations(range(len(nets)), 2)]
        return float(np.mean(vals))

    def sa2(perms):
        permuted = [permalg.apply(n, p) for n, p in zip(nets, perms)]
        return evaluate(average(permuted), dataset, cfg.split).error

    return sa1 if cfg.objective == SA1 else sa2


def sa_search(nets: Sequence[Network], dataset, cfg: SAConfig) -> SearchResult:
    """Anneal one permutation per model to minimize the multi-model energy."""
    nets = list(nets)
    if len(nets) != cfg.n_models:
        raise ValueError(f"expected {cfg.n_models} networks, got {len(nets)}")
    if len(dataset.split(cfg.split)[1]) == 0:
        raise ValueError("empty dataset split")
    energy = multi_model_energy(nets, dataset, cfg)
    initial = [permalg.identity_perm(n) for n in nets]
    frozen = [cfg.pin_first] + [False] * (len(nets) - 1)
    res = anneal(energy, initial, cfg, frozen)
    res.method = f"sa-{cfg.objective}"
    return res


def reduced_energy(net1: Network, net2: Network, dataset, metric: str = LOSS, split: str = "train"):
    """Midpoint barrier between ``apply(net1, perm)`` and ``net2``, floored at 0."""
    _check_same([net1, net2])
    end2 = evaluate(net2, dataset, split)

    def energy(perms):
        moved = permalg.apply(net1, perms[0])
        ends = (evaluate(moved, dataset, split), end2)
        return max(0.0, midpoint_stats(moved, net2, dataset, split, ends)[metric])

    return energy


def sa_search_reduced(net1: Network, net2: Network, dataset, cfg: SAConfig) -> SearchResult:
    """Anneal only ``net1``'s permutation against a fixed ``net2``."""
    if len(dataset.split(cfg.split)[1]) == 0:
        raise ValueError("empty dataset split")
    energy = reduced_energy(net1, net2, dataset, cfg.metric, cfg.split)
    res = anneal(energy, [permalg.identity_perm(net1)], cfg)
    res.method = "sa-reduced"
    return res


# ---------------------------------------------------------------------------
# functional difference


@dataclass(frozen=True, eq=False)
class MatchCostMatrix:
    costs: np.ndarray
    curvature_a: np.ndarray
    curvature_b: np.ndarray
    clamped: int = 0


def incoming_weights(net: Network, layer: int) -> np.ndarray:
    """One row per unit of ``layer``: its flattened incoming weights, then its bias."""
    lay = net.layers[layer]
    w = lay.weight.reshape(lay.out_units, -1).astype(np.float64)
    if lay.bias is not None:
        w = np.concatenate([w, lay.bias.astype(np.float64)[:, None]], axis=1)
    return w


def mean_sq_activation(net: Network, dataset, layer: int, split: str = "train") -> np.ndarray:
    """Per-unit mean squared post-activation (over examples and, for conv, positions)."""
    x, _ = dataset.split(split)
    total = np.zeros(net.layers[layer].out_units)
    count = 0
    for start in range(0, len(x), 1024):
        a = hidden_activations(net, x[start:start + 1024], layer)
        if a.ndim == 4:
            total += (a ** 2).sum(axis=(0, 2, 3))
            count += a.shape[0] * a.shape[2] * a.shape[3]
        else:
            total += (a ** 2).sum(axis=0)
            count += a.shape[0]
    return total / count


def fd_costs(netA: Network, netB: Network, dataset, layer: int,
             curvature: Callable[[Network, object, int], np.ndarray] = mean_sq_activation) -> MatchCostMatrix:
    """Functional difference between every unit pair of hidden layer ``layer``.

    cost[i, j] = 1/2 * dw^T ((h_i^A)^-1 + (h_j^B)^-1)^-1 dw with scalar curvatures h,
    i.e. 1/2 * h_i h_j / (h_i + h_j) * ||w_i^A - w_j^B||^2.
    """
    _check_same([netA, netB])
    if not 0 <= layer < netA.hidden_layers:
        raise IndexError(f"layer {layer} is not a hidden layer")
    ha = np.asarray(curvature(netA, dataset, layer), dtype=np.float64)
    hb = np.asarray(curvature(netB, dataset, layer), dtype=np.float64)
    clamped = int(np.count_nonzero(ha < CURVATURE_FLOOR) + np.count_nonzero(hb < CURVATURE_FLOOR))
    ha = np.maximum(ha, CURVATURE_FLOOR)
    hb = np.maximum(hb, CURVATURE_FLOOR)
    wa, wb = incoming_weights(netA, layer), incoming_weights(netB, layer)
    na, nb = (wa ** 2).sum(1), (wb ** 2).sum(1)
    sq = np.maximum(na[:, None] + nb[None, :] - 2.0 * wa @ wb.T, 0.0)
    # the expanded form loses exact zeros to cancellation; redo near-zero entries directly
    ri, ci = np.nonzero(sq <= 1e-9 * (na[:, None] + nb[None, :] + 1e-300))
    if len(ri):
        diff = wa[ri] - wb[ci]
        sq[ri, ci] = (diff ** 2).sum(1)
    scale = ha[:, None] * hb[None, :] / (ha[:, None] + hb[None, :])
    return MatchCostMatrix(0.5 * scale * sq, ha, hb, clamped)


def pair_cost(wa: np.ndarray, wb: np.ndarray, ha: float, hb: float) -> float:
    d = np.asarray(wa, float) - np.asarray(wb, float)
    return 0.5 * float(d @ d) / (1.0 / ha + 1.0 / hb)


def greedy_match(costs) -> np.ndarray:
    """Repeatedly take the smallest remaining entry (ties: lowest row, then column) and
    delete its row and column. Returns ``p`` with ``p[j]`` = row matched to column ``j``."""
    c = np.asarray(getattr(costs, "costs", costs), dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    h = c.shape[0]
    rows, cols = np.divmod(np.arange(h * h), h)
    order = np.lexsort((cols, rows, c.ravel()))
    row_used = np.zeros(h, bool)
    col_used = np.zeros(h, bool)
    p = np.empty(h, dtype=np.int64)
    matched = 0
    for k in order:
        r, q = rows[k], cols[k]
        if row_used[r] or col_used[q]:
            continue
        row_used[r] = col_used[q] = True
        p[q] = r
        matched += 1
        if matched == h:
            break
    return p


def fd_align(netA: Network, netB: Network, dataset) -> Permutation:
    """Layer by layer: functional-difference costs of (already permuted) A vs B, greedy match."""
    _check_same([netA, netB])
    current = netA
    per_layer = []
    for layer in range(netA.hidden_layers):
        p = greedy_match(fd_costs(current, netB, dataset, layer))
        current = permalg.apply(current, permalg.single_layer(current, layer, p))
        per_layer.append(p)
    return Permutation(tuple(per_layer))


# ---------------------------------------------------------------------------
# grid-bucket matching


@dataclass(frozen=True, eq=False)
class BucketMatching:
    perm: np.ndarray
    n_leftover: int
    xi: float
    cells_per_dim: int


def grid_cells(U: np.ndarray, xi: float) -> tuple[np.ndarray, int, float]:
    """Cell coordinates of each row of ``U`` on the grid {-r+xi, -r+3xi, ..., r-xi}^d, r=1/sqrt(d).

    Every coordinate goes to its nearest grid value, which is also a nearest cell in both the
    max-norm and the Euclidean norm; exact midpoints go to the lower cell.
    """
    U = np.asarray(U, dtype=np.float64)
    d = U.shape[1]
    r = 1.0 / math.sqrt(d)
    m_exact = r / xi
    m = int(round(m_exact))
    if m < 1 or abs(m - m_exact) > 1e-9 * max(1.0, m_exact):
        m = max(1, math.ceil(m_exact - 1e-9))
        new_xi = r / m
        warnings.warn(f"xi={xi:g} does not divide 1/sqrt(d); snapped down to {new_xi:g}", stacklevel=2)
        xi = new_xi
    if np.any(np.abs(U) > r * (1 + 1e-12)):
        raise ValueError("weight entries must lie in [-1/sqrt(d), 1/sqrt(d)]")
    k = np.ceil((U + r) / (2 * xi)).astype(np.int64) - 1
    return np.clip(k, 0, m - 1), m, xi


def grid_bucket_match(U: np.ndarray, U_prime: np.ndarray, xi: float, seed,
                      keys: tuple[np.ndarray, np.ndarray] | None = None) -> BucketMatching:
    """Match rows of ``U_prime`` to rows of ``U`` through shared grid cells.

    Within a cell rows are paired at random; surplus rows on either side go to leftover
    pools that are paired at random with each other. ``perm[i]`` is the row of ``U_prime``
    matched to row ``i`` of ``U``.

    If ``keys = (k, k_prime)`` is given (one scalar per row, e.g. output weights), which
    rows spill over is still random, but the pairing inside each cell and inside the
    leftover pools is by rank of the key instead of uniform.
    """
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(U_prime, dtype=np.float64)
    if U.shape != V.shape:
        raise ValueError("U and U_prime must have the same shape")
    h = U.shape[0]
    rng = np.random.default_rng(seed)
    cu, m, xi = grid_cells(U, xi)
    cv, _, _ = grid_cells(V, xi)
    # cells are keyed sparsely by occupied coordinates only
    cells, inv = np.unique(np.concatenate([cu, cv]), axis=0, return_inverse=True)
    inv = inv.ravel()
    iu, iv = inv[:h], inv[h:]
    ou = np.argsort(iu, kind="stable")
    ov = np.argsort(iv, kind="stable")
    bu = np.searchsorted(iu[ou], np.arange(len(cells) + 1))
    bv = np.searchsorted(iv[ov], np.arange(len(cells) + 1))
    if keys is None:
        def pair(a, b):
            return a, rng.permutation(b)
    else:
        ku, kv = (np.asarray(k, dtype=np.float64) for k in keys)
        if ku.shape != (h,) or kv.shape != (h,):
            raise ValueError("keys must hold one value per row")

        def pair(a, b):
            return a[np.argsort(ku[a], kind="stable")], b[np.argsort(kv[b], kind="stable")]

    perm = np.full(h, -1, dtype=np.int64)
    left_u, left_v = [], []
    for c in range(len(cells)):
        a = rng.permutation(ou[bu[c]:bu[c + 1]])
        b = rng.permutation(ov[bv[c]:bv[c + 1]])
        k = min(len(a), len(b))
        a_k, b_k = pair(a[:k], b[:k])
        perm[a_k] = b_k
        left_u.extend(a[k:].tolist())
        left_v.extend(b[k:].tolist())
    a_k, b_k = pair(np.asarray(left_u, dtype=np.int64), np.asarray(left_v, dtype=np.int64))
    perm[a_k] = b_k
    return BucketMatching(perm, len(left_u), xi, m)


# ---------------------------------------------------------------------------
# exhaustive search


def brute_force_match(net1: Network, net2: Network, dataset, width_limit: int = BRUTE_FORCE_LIMIT,
                      metric: str = LOSS, split: str = "train") -> SearchResult:
    """Try every permutation of the single hidden layer (lexicographic order); keep the first
    minimum of the midpoint barrier."""
    _check_same([net1, net2])
    if net1.hidden_layers != 1:
        raise ValueError("brute force supports networks with exactly one hidden layer")
    h = net1.hidden_widths()[0]
    if h > width_limit:
        raise WidthLimitError(f"width above brute-force limit ({h} > {width_limit})")
    energy = reduced_energy(net1, net2, dataset, metric, split)
    best_p, best_e = None, math.inf
    initial = None
    trace = []
    count = 0
    for idx in itertools.permutations(range(h)):
        p = Permutation((np.asarray(idx, dtype=np.int64),))
        e = energy([p])
        if initial is None:
            initial = e
        count += 1
        if e < best_e:
            best_p, best_e = p, e
            trace.append((count - 1, best_e))
    trace.append((count - 1, best_e))
    return SearchResult([best_p], trace, initial, best_e, count, None, method="brute",
                        config={"width_limit": width_limit, "metric": metric, "split": split})

