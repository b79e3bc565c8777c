"""Small ReLU networks in numpy: construction, exact forward/backward, SGD, weight arithmetic.

Parameters are stored as float32; every forward, backward and reduction runs in float64.
Convolutions are 2-D, stride 1 with "same" padding by default, lowered to matmuls via im2col.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_DTYPE = np.float32
ACC_DTYPE = np.float64

DENSE = "dense"
CONV = "conv2d"
RELU = "relu"

MLP = "mlp"
SHALLOW_CNN = "shallow_cnn"


class ShapeError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Layer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    activation: str | None = None
    stride: int = 1
    padding: int = 0

    @property
    def out_units(self) -> int:
        return int(self.weight.shape[0])

    @property
    def in_units(self) -> int:
        return int(self.weight.shape[1])

    def arrays(self) -> list[np.ndarray]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


@dataclass(frozen=True, eq=False)
class Network:
    """An immutable stack of layers; ``layers[-1]`` always emits logits."""

    layers: tuple[Layer, ...]
    arch_kind: str
    in_shape: tuple[int, ...]
    num_classes: int
    init_seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "in_shape", tuple(int(s) for s in self.in_shape))
        _check_layers(self)

    @property
    def hidden_layers(self) -> int:
        return len(self.layers) - 1

    def hidden_widths(self) -> list[int]:
        return [layer.out_units for layer in self.layers[:-1]]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.arrays())
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def with_params(self, params: Sequence[np.ndarray], dtype=PARAM_DTYPE) -> "Network":
        """Copy of this network with parameters replaced (same order as :meth:`params`)."""
        it = iter(params)
        layers = []
        for layer in self.layers:
            w = np.asarray(next(it), dtype=dtype)
            b = None if layer.bias is None else np.asarray(next(it), dtype=dtype)
            layers.append(dataclasses.replace(layer, weight=w, bias=b))
        return dataclasses.replace(self, layers=tuple(layers), meta=dict(self.meta))

    def same_architecture(self, other: "Network") -> bool:
        if self.arch_kind != other.arch_kind or self.in_shape != other.in_shape:
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if (a.kind, a.activation, a.stride, a.padding) != (b.kind, b.activation, b.stride, b.padding):
                return False
            if a.weight.shape != b.weight.shape or (a.bias is None) != (b.bias is None):
                return False
        return True

    def describe(self) -> dict:
        widths = self.hidden_widths()
        return {
            "arch": self.arch_kind,
            "depth": self.hidden_layers,
            "width": widths[0] if widths else 0,
            "in_shape": list(self.in_shape),
            "num_classes": self.num_classes,
        }


def _check_layers(net: Network) -> None:
    layers = net.layers
    if not layers:
        raise ShapeError("network needs at least one layer")
    if layers[-1].activation is not None:
        raise ShapeError("final layer must emit logits (activation None)")
    if layers[-1].out_units != net.num_classes:
        raise ShapeError("final layer width does not match num_classes")
    shape = net.in_shape
    for i, layer in enumerate(layers):
        if layer.bias is not None and layer.bias.shape != (layer.out_units,):
            raise ShapeError(f"layer {i}: bias shape {layer.bias.shape}")
        if layer.kind == CONV:
            if len(shape) != 3 or layer.weight.ndim != 4 or layer.weight.shape[1] != shape[0]:
                raise ShapeError(f"layer {i}: conv kernel {layer.weight.shape} vs input {shape}")
            shape = (layer.out_units,) + _conv_out_hw(shape[1:], layer)
        elif layer.kind == DENSE:
            if layer.weight.ndim != 2 or layer.in_units != int(np.prod(shape)):
                raise ShapeError(f"layer {i}: dense weight {layer.weight.shape} vs input {shape}")
            shape = (layer.out_units,)
        else:
            raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")


def _conv_out_hw(hw, layer: Layer) -> tuple[int, int]:
    kh, kw = layer.weight.shape[2:]
    out = tuple((s + 2 * layer.padding - k) // layer.stride + 1 for s, k in zip(hw, (kh, kw)))
    if min(out) <= 0:
        raise ShapeError(f"conv output spatial size {out} is not positive")
    return out


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(PARAM_DTYPE)


def _positive(**dims) -> None:
    for name, v in dims.items():
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")


def build_mlp(depth: int, width: int, in_dim: int, classes: int, seed: int, bias: bool = True) -> Network:
    """``depth`` hidden Dense+ReLU layers of equal ``width`` and a Dense logit layer.

    Weights are i.i.d. uniform on +-1/sqrt(fan_in). Biases (when enabled) start at zero.
    """
    _positive(depth=depth, width=width, in_dim=in_dim, classes=classes)
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = in_dim
    for _ in range(depth):
        w = _uniform(rng, (width, fan_in), fan_in)
        layers.append(Layer(DENSE, w, np.zeros(width, PARAM_DTYPE) if bias else None, RELU))
        fan_in = width
    w = _uniform(rng, (classes, fan_in), fan_in)
    layers.append(Layer(DENSE, w, np.zeros(classes, PARAM_DTYPE) if bias else None, None))
    return Network(tuple(layers), MLP, (in_dim,), classes, seed)


def build_shallow_cnn(
    depth: int,
    channels: int,
    in_shape: Sequence[int],
    classes: int,
    seed: int,
    bias: bool = True,
    kernel: int = 3,
) -> Network:
    """``depth`` 3x3 conv+ReLU layers (stride 1, same padding, no pooling), flatten, dense head.

    ``in_shape`` is (channels, height, width).
    """
    _positive(depth=depth, channels=channels, classes=classes)
    in_shape = tuple(int(s) for s in in_shape)
    if len(in_shape) != 3 or min(in_shape) < 1:
        raise ShapeError(f"in_shape must be (C, H, W) with positive entries, got {in_shape}")
    rng = np.random.default_rng(seed)
    layers = []
    c, h, w = in_shape
    pad = kernel // 2
    for _ in range(depth):
        fan_in = c * kernel * kernel
        k = _uniform(rng, (channels, c, kernel, kernel), fan_in)
        layer = Layer(CONV, k, np.zeros(channels, PARAM_DTYPE) if bias else None, RELU, 1, pad)
        h, w = _conv_out_hw((h, w), layer)
        layers.append(layer)
        c = channels
    fan_in = c * h * w
    head = _uniform(rng, (classes, fan_in), fan_in)
    layers.append(Layer(DENSE, head, np.zeros(classes, PARAM_DTYPE) if bias else None, None))
    return Network(tuple(layers), SHALLOW_CNN, in_shape, classes, seed)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, layer: Layer) -> tuple[np.ndarray, tuple[int, int]]:
    kh, kw = layer.weight.shape[2:]
    p, s = layer.padding, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, (ho, wo)


def _sorted_matmul(a: np.ndarray, w: np.ndarray, chunk: int = 64) -> np.ndarray:
    # Sorting the products before summing makes the result independent of the order of
    # the contraction axis, so reindexed-but-equal networks give bit-identical outputs.
    out = np.empty((a.shape[0], w.shape[0]), dtype=ACC_DTYPE)
    for start in range(0, a.shape[0], chunk):
        prod = a[start:start + chunk, None, :] * w[None, :, :]
        prod.sort(axis=-1)
        out[start:start + chunk] = prod.sum(axis=-1)
    return out


def _matmul(a: np.ndarray, w: np.ndarray, canonical: bool) -> np.ndarray:
    return _sorted_matmul(a, w) if canonical else a @ w.T


def _as_batch(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=ACC_DTYPE)
    if net.layers[0].kind == CONV:
        if x.shape[1:] != net.in_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match input shape {net.in_shape}")
        return x
    x = x.reshape(x.shape[0], -1)
    if x.shape[1] != net.in_shape[0]:
        raise ShapeError(f"batch feature size {x.shape[1]} does not match input size {net.in_shape[0]}")
    return x


def _forward_trace(net: Network, x: np.ndarray, canonical: bool = False, keep: bool = True):
    """Run the network; returns logits and (when ``keep``) per-layer caches for backprop."""
    a = _as_batch(net, x)
    caches = []
    for layer in net.layers:
        w = layer.weight.astype(ACC_DTYPE)
        if layer.kind == CONV:
            n = a.shape[0]
            cols, (ho, wo) = _im2col(a, layer)
            z = _matmul(cols, w.reshape(w.shape[0], -1), canonical)
            if layer.bias is not None:
                z += layer.bias
            z = z.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
            cache = (a.shape, cols)
        else:
            flat = a.reshape(a.shape[0], -1)
            z = _matmul(flat, w, canonical)
            if layer.bias is not None:
                z += layer.bias
            cache = (a.shape, flat)
        if layer.activation == RELU:
            mask = z > 0
            a = np.where(mask, z, 0.0)
        else:
            mask = None
            a = z
        if keep:
            caches.append((cache, mask))
    return a, caches


def forward(net: Network, x: np.ndarray, canonical: bool = False) -> np.ndarray:
    """Logits of shape (batch, classes), computed in float64.

    With ``canonical=True`` every contraction sums its products in sorted order; the
    result is then exactly invariant to hidden-unit permutations (slow, for verification).
    """
    logits, _ = _forward_trace(net, x, canonical=canonical, keep=False)
    return logits


def hidden_activations(net: Network, x: np.ndarray, layer: int) -> np.ndarray:
    """Post-activation output of hidden layer ``layer`` (0-based)."""
    if not 0 <= layer < net.hidden_layers:
        raise IndexError(f"layer {layer} is not a hidden layer")
    a = _as_batch(net, x)
    for i, lay in enumerate(net.layers[: layer + 1]):
        w = lay.weight.astype(ACC_DTYPE)
        if lay.kind == CONV:
            n = a.shape[0]
            cols, (ho, wo) = _im2col(a, lay)
            z = cols @ w.reshape(w.shape[0], -1).T
            if lay.bias is not None:
                z += lay.bias
            z = z.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        else:
            z = a.reshape(a.shape[0], -1) @ w.T
            if lay.bias is not None:
                z += lay.bias
        a = np.maximum(z, 0.0) if lay.activation == RELU else z
    return a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy in nats (stable log-sum-exp)."""
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss_and_grads(net: Network, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy and its gradient w.r.t. every parameter (order of ``net.params()``)."""
    y = np.asarray(y)
    logits, caches = _forward_trace(net, x)
    n = len(y)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads: list[np.ndarray] = []
    for layer, ((in_shape, inp), mask) in zip(reversed(net.layers), reversed(caches)):
        if mask is not None:
            delta = delta * mask
        w = layer.weight.astype(ACC_DTYPE)
        if layer.kind == CONV:
            o = w.shape[0]
            dz = delta.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (dz.T @ inp).reshape(w.shape)
            gb = dz.sum(axis=0)
            dcols = dz @ w.reshape(o, -1)
            delta = _col2im(dcols, in_shape, layer)
        else:
            gw = delta.T @ inp
            gb = delta.sum(axis=0)
            delta = (delta @ w).reshape(in_shape)
        if layer.bias is not None:
            grads.append(gb)
        grads.append(gw)
    grads.reverse()
    return float(loss), grads


def _col2im(dcols: np.ndarray, in_shape, layer: Layer) -> np.ndarray:
    n, c, h, w = in_shape
    kh, kw = layer.weight.shape[2:]
    p, s = layer.padding, layer.stride
    ho, wo = _conv_out_hw((h, w), layer)
    d = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=ACC_DTYPE)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx[:, :, p:p + h, p:p + w]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalResult:
    loss: float
    error: float


def evaluate_logits(logits_fn, x: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> EvalResult:
    """Mean cross-entropy and error of any batch -> logits function."""
    n = len(y)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    losses = np.empty(n, dtype=ACC_DTYPE)
    wrong = 0
    for start in range(0, n, batch_size):
        logits = logits_fn(x[start:start + batch_size])
        yb = y[start:start + batch_size]
        losses[start:start + batch_size] = cross_entropy(logits, yb)
        # argmax takes the first maximum, i.e. ties go to the lowest class index
        wrong += int(np.count_nonzero(logits.argmax(axis=1) != yb))
    # fsum is exactly rounded, hence independent of example order
    return EvalResult(math.fsum(losses) / n, wrong / n)


def evaluate_arrays(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 1024,
                    canonical: bool = False) -> EvalResult:
    return evaluate_logits(lambda xb: forward(net, xb, canonical=canonical), x, y, batch_size)


def evaluate(net: Network, dataset, split: str = "train", canonical: bool = False) -> EvalResult:
    """Mean cross-entropy and top-1 error of ``net`` on ``dataset``'s ``split``."""
    x, y = dataset.split(split)
    return evaluate_arrays(net, x, y, canonical=canonical)


# ---------------------------------------------------------------------------
# training


FIXED = "fixed"
COSINE = "cosine"


@dataclass(frozen=True)
class TrainConfig:
    """SGD hyper-parameters; defaults are the MLP/MNIST column of the reference table."""

    lr: float = 0.01
    lr_schedule: str = FIXED
    batch_size: int = 64
    max_epochs: int = 3000
    momentum: float = 0.9
    stop_loss: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.lr_schedule not in (FIXED, COSINE):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.stop_loss > 0:
            raise ValueError("stop_loss must be positive")

    @classmethod
    def table_defaults(cls, arch: str, dataset: str = "mnist", **overrides) -> "TrainConfig":
        if arch == MLP:
            base = dict(lr=0.01 if dataset == "mnist" else 0.001, lr_schedule=FIXED,
                        batch_size=64, max_epochs=3000)
        elif arch == SHALLOW_CNN:
            base = dict(lr=0.02, lr_schedule=COSINE, batch_size=256, max_epochs=1000)
        else:
            raise ValueError(f"unknown architecture {arch!r}")
        base.update(overrides)
        return cls(**base)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == FIXED:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.max_epochs))


def train(net: Network, dataset, cfg: TrainConfig, log=None) -> Network:
    """SGD with momentum on the train split until epoch-mean CE <= ``cfg.stop_loss``
    (never, if it is infinite) or ``cfg.max_epochs`` have run.

    Shuffling depends only on ``cfg.seed``. The returned network carries a ``train``
    record in ``meta`` (epochs run, final epoch-mean loss, whether the stop rule fired).
    """
    x, y = dataset.split("train")
    if len(y) == 0:
        raise ValueError("empty train split")
    rng = np.random.default_rng(cfg.seed)
    params = [p.astype(PARAM_DTYPE, copy=True) for p in net.params()]
    velocity = [np.zeros(p.shape, dtype=ACC_DTYPE) for p in params]
    n = len(y)
    history = []
    stopped = False
    epoch = 0
    current = net
    for epoch in range(cfg.max_epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(current, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start} (lr={lr:g})")
            total += loss * len(idx)
            for i, g in enumerate(grads):
                velocity[i] *= cfg.momentum
                velocity[i] += g
                params[i] = (params[i] - lr * velocity[i]).astype(PARAM_DTYPE)
            current = current.with_params(params)
        epoch_loss = total / n
        history.append(epoch_loss)
        if log is not None:
            log(epoch, epoch_loss)
        # an infinite stop_loss disables early stopping
        if math.isfinite(cfg.stop_loss) and epoch_loss <= cfg.stop_loss:
            stopped = True
            break
    if not all(np.isfinite(p).all() for p in params):
        raise TrainingDiverged("parameters became non-finite")
    record = {
        "epochs": epoch + 1,
        "final_epoch_loss": history[-1],
        "reached_stop_loss": stopped,
        "config": dataclasses.asdict(cfg),
    }
    meta = dict(net.meta)
    meta["train"] = record
    return dataclasses.replace(current, meta=meta)


# ---------------------------------------------------------------------------
# weight-space arithmetic


def _require_same(nets: Sequence[Network]) -> None:
    for other in nets[1:]:
        if not nets[0].same_architecture(other):
            raise ShapeError("networks have different architectures")


def blend(net1: Network, net2: Network, w1: float, w2: float) -> Network:
    """Parameterwise ``w1*net1 + w2*net2`` in float64, stored as float32."""
    _require_same([net1, net2])
    params = [w1 * a.astype(ACC_DTYPE) + w2 * b.astype(ACC_DTYPE)
              for a, b in zip(net1.params(), net2.params())]
    return dataclasses.replace(net1.with_params(params), init_seed=None, meta={})


def interpolate(net1: Network, net2: Network, alpha: float) -> Network:
    """``alpha*net1 + (1-alpha)*net2``; alpha=1 gives net1."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return blend(net1, net2, alpha, 1.0 - alpha)


def average(nets: Sequence[Network]) -> Network:
    """Uniform parameter mean of one or more networks."""
    nets = list(nets)
    if not nets:
        raise ValueError("average of an empty list")
    _require_same(nets)
    k = len(nets)
    cols = zip(*(n.params() for n in nets))
    params = [np.sum([p.astype(ACC_DTYPE) for p in group], axis=0) / k for group in cols]
    return dataclasses.replace(nets[0].with_params(params), init_seed=None, meta={})
