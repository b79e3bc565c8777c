"""Hidden-unit permutations of a network, stored as index vectors.

Convention: applying ``p`` to a layer gathers, i.e. the new unit ``k`` is the old unit
``p[k]``. Every operation here is pure reindexing; no arithmetic touches parameter values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netcore import CONV, Network


class PermutationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Permutation:
    per_layer: tuple[np.ndarray, ...]

    def __post_init__(self):
        layers = tuple(np.asarray(p, dtype=np.int64) for p in self.per_layer)
        for i, p in enumerate(layers):
            if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
                raise PermutationError(f"layer {i} index vector is not a bijection")
            p.setflags(write=False)
        object.__setattr__(self, "per_layer", layers)

    def __eq__(self, other):
        if not isinstance(other, Permutation) or len(self.per_layer) != len(other.per_layer):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.per_layer, other.per_layer))

    def __hash__(self):
        return hash(tuple(p.tobytes() for p in self.per_layer))

    @property
    def widths(self) -> list[int]:
        return [len(p) for p in self.per_layer]

    def is_identity(self) -> bool:
        return all(np.array_equal(p, np.arange(len(p))) for p in self.per_layer)

    def to_lists(self) -> list[list[int]]:
        return [p.tolist() for p in self.per_layer]

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> "Permutation":
        return cls(tuple(np.asarray(p, dtype=np.int64) for p in lists))

    def __repr__(self):
        return f"Permutation({self.to_lists()})"


def check_compatible(net: Network, perm: Permutation) -> None:
    if perm.widths != net.hidden_widths():
        raise PermutationError(
            f"permutation widths {perm.widths} do not match hidden widths {net.hidden_widths()}")


def identity_perm(net: Network) -> Permutation:
    return Permutation(tuple(np.arange(w) for w in net.hidden_widths()))


def random_perm(net: Network, seed) -> Permutation:
    """Independent uniform shuffles per hidden layer; ``seed`` may be an int or a Generator."""
    rng = np.random.default_rng(seed)
    return Permutation(tuple(rng.permutation(w) for w in net.hidden_widths()))


def apply(net: Network, perm: Permutation) -> Network:
    """Permute hidden units: layer i becomes P_i W_i P_{i-1}^T (output layer rows untouched)."""
    check_compatible(net, perm)
    layers = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        w, b = layer.weight, layer.bias
        if i < last:
            p = perm.per_layer[i]
            w = w[p]
            b = None if b is None else b[p]
        if i > 0:
            q = perm.per_layer[i - 1]
            prev = net.layers[i - 1]
            if layer.kind == CONV:
                w = w[:, q]
            elif prev.kind == CONV:
                # flatten is channel-major: each channel's spatial block moves as a unit
                c = prev.out_units
                w = w.reshape(w.shape[0], c, -1)[:, q, :].reshape(w.shape[0], -1)
            else:
                w = w[:, q]
        layers.append(dataclasses.replace(layer, weight=np.ascontiguousarray(w), bias=b))
    return dataclasses.replace(net, layers=tuple(layers), meta=dict(net.meta))


def compose(p1: Permutation, p2: Permutation) -> Permutation:
    """Permutation equal to applying ``p2`` first, then ``p1``."""
    if p1.widths != p2.widths:
        raise PermutationError("cannot compose permutations of different shapes")
    return Permutation(tuple(b[a] for a, b in zip(p1.per_layer, p2.per_layer)))


def invert(p: Permutation) -> Permutation:
    return Permutation(tuple(np.argsort(q, kind="stable") for q in p.per_layer))


def transposition_move(perm: Permutation, swaps_per_layer: int, seed) -> Permutation:
    """Swap ``swaps_per_layer`` uniformly drawn index pairs in every layer (a == b allowed)."""
    if swaps_per_layer < 1:
        raise ValueError("swaps_per_layer must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for p in perm.per_layer:
        q = p.copy()
        for _ in range(swaps_per_layer):
            a, b = rng.integers(0, len(q), size=2)
            q[a], q[b] = q[b], q[a]
        out.append(q)
    return Permutation(tuple(out))


def single_layer(net: Network, layer: int, p: np.ndarray) -> Permutation:
    """Permutation acting only on hidden layer ``layer``."""
    widths = net.hidden_widths()
    per = [np.arange(w) for w in widths]
    per[layer] = np.asarray(p, dtype=np.int64)
    return Permutation(tuple(per))

