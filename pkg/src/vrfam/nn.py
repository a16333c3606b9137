"""Minimal differentiable-layer engine.

Implements exactly the layer set the three window classifiers need (dense,
1-d convolution, batch norm, ReLU, max/global-average pooling, softmax,
concat, add, flatten), a DAG container with forward/backward execution and
symbolic shape inference, label-smoothed cross-entropy, the Adam optimizer,
and a single-file checkpoint format.

Conventions
-----------
Activations are numpy arrays with the batch axis first: dense layers see
(B, D), temporal layers see (B, C, L) channels-first. Convolutions are
stride 1 with "same" zero padding (asymmetric for even kernels: left pad
(k-1)//2). Batch norm normalizes each channel over batch and time with
biased variance and keeps running statistics with EMA momentum 0.9 for Eval
mode. The cross-entropy gradient is taken with respect to pre-softmax
logits in the numerically fused form (p - q) / B, so Softmax itself is
skipped during backprop.

Every forward output is checked finite; NaN or Inf raises NonFiniteOutput
naming the offending node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
CHECKPOINT_FORMAT_VERSION = 1


class ShapeMismatch(ValueError):
    """Operands or wiring with incompatible shapes."""


class NonFiniteOutput(ArithmeticError):
    """A forward pass or loss produced NaN or Inf."""


class NoCachedForward(RuntimeError):
    """backward() called before forward() on the same layer."""


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


def _as_tuple(x) -> tuple:
    return x if isinstance(x, tuple) else (x,)


class Layer:
    """Base class: parameters, gradients, and cached forward state."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: list[np.ndarray] = []
        self.grads: list[np.ndarray] = []
        self.state: list[np.ndarray] = []
        self._cache = None

    def hyperparams(self) -> dict:
        return {}

    def out_shape(self, *in_shapes: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, *xs: np.ndarray, mode: Mode = Mode.EVAL) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise NoCachedForward(f"{type(self).__name__}: no cached forward pass")
        cache, self._cache = self._cache, None
        return cache


class Dense(Layer):
    """Affine map y = x W^T + b with W of shape (out_dim, in_dim)."""

    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ValueError("dense dimensions must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = np.zeros((out_dim, in_dim))
        self.b = np.zeros(out_dim)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def hyperparams(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_dim:
            raise ShapeMismatch(
                f"dense expects ({self.in_dim},) features, got {in_shape}"
            )
        return (self.out_dim,)

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"dense expects (B, {self.in_dim}), got {x.shape}")
        if mode is Mode.TRAIN:
            self._cache = x
        return x @ self.W.T + self.b

    def backward(self, dy):
        x = self._take_cache()
        self.grads[0][...] = dy.T @ x
        self.grads[1][...] = dy.sum(axis=0)
        return dy @ self.W


def _pad_lr(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def _sliding(xp: np.ndarray, kernel: int) -> np.ndarray:
    # (B, C, Lp) -> read-only view (B, C, kernel, Lp - kernel + 1)
    b, c, lp = xp.shape
    s0, s1, s2 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (b, c, kernel, lp - kernel + 1), (s0, s1, s2, s2)
    )


class Conv1D(Layer):
    """Stride-1 same-padded temporal convolution, computed as one GEMM.

    Forward lowers the padded input to a (C*k, B*L) column matrix and
    multiplies by the (O, C*k) weight matrix; backward reuses the cached
    columns for the weight gradient and scatters the column gradient back
    with k shifted adds.
    """

    kind = "conv1d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int) -> None:
        super().__init__()
        if min(in_channels, out_channels, kernel) < 1:
            raise ValueError("conv1d channels and kernel must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.W = np.zeros((out_channels, in_channels, kernel))
        self.b = np.zeros(out_channels)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def hyperparams(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
        }

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != self.in_channels:
            raise ShapeMismatch(
                f"conv1d expects ({self.in_channels}, L), got {in_shape}"
            )
        return (self.out_channels, in_shape[1])

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeMismatch(
                f"conv1d expects (B, {self.in_channels}, L), got {x.shape}"
            )
        b, c, length = x.shape
        left, right = _pad_lr(self.kernel)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
        cols = _sliding(xp, self.kernel)  # (B, C, k, L)
        # (C*k, B*L) with batch fastest-varying inside each row block
        cols_m = np.ascontiguousarray(cols.transpose(1, 2, 0, 3)).reshape(
            c * self.kernel, b * length
        )
        w2 = self.W.reshape(self.out_channels, c * self.kernel)
        y = (w2 @ cols_m).reshape(self.out_channels, b, length)
        if mode is Mode.TRAIN:
            self._cache = (cols_m, b, length)
        return y.transpose(1, 0, 2) + self.b[None, :, None]

    def backward(self, dy):
        cols_m, b, length = self._take_cache()
        c, k = self.in_channels, self.kernel
        dy_m = np.ascontiguousarray(dy.transpose(1, 0, 2)).reshape(
            self.out_channels, b * length
        )
        self.grads[0][...] = (dy_m @ cols_m.T).reshape(self.W.shape)
        self.grads[1][...] = dy_m.sum(axis=1)
        w2 = self.W.reshape(self.out_channels, c * k)
        dcols = (w2.T @ dy_m).reshape(c, k, b, length)
        left, right = _pad_lr(k)
        dxp = np.zeros((b, c, length + left + right), dtype=dy.dtype)
        for kk in range(k):
            dxp[:, :, kk : kk + length] += dcols[:, kk].transpose(1, 0, 2)
        return dxp[:, :, left : left + length]


class BatchNorm1D(Layer):
    """Per-channel batch normalization over the batch and time axes.

    Train mode normalizes with biased batch statistics and updates running
    estimates (running = momentum * running + (1 - momentum) * batch); Eval
    mode normalizes with the running estimates.
    """

    kind = "batchnorm1d"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5) -> None:
        super().__init__()
        if channels < 1:
            raise ValueError("batchnorm channels must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.params = [self.gamma, self.beta]
        self.grads = [np.zeros_like(self.gamma), np.zeros_like(self.beta)]
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.state = [self.running_mean, self.running_var]

    def hyperparams(self) -> dict:
        return {"channels": self.channels, "momentum": self.momentum, "eps": self.eps}

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[0] != self.channels:
            raise ShapeMismatch(
                f"batchnorm expects ({self.channels}, L), got {in_shape}"
            )
        return in_shape

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 3 or x.shape[1] != self.channels:
            raise ShapeMismatch(
                f"batchnorm expects (B, {self.channels}, L), got {x.shape}"
            )
        if mode is Mode.TRAIN:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            self.running_mean[...] = (
                self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            )
            self.running_var[...] = (
                self.momentum * self.running_var + (1.0 - self.momentum) * var
            )
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
        if mode is Mode.TRAIN:
            self._cache = (xhat, inv_std)
        return self.gamma[None, :, None] * xhat + self.beta[None, :, None]

    def backward(self, dy):
        xhat, inv_std = self._take_cache()
        self.grads[0][...] = (dy * xhat).sum(axis=(0, 2))
        self.grads[1][...] = dy.sum(axis=(0, 2))
        dxhat = dy * self.gamma[None, :, None]
        n = dy.shape[0] * dy.shape[2]
        sum_d = dxhat.sum(axis=(0, 2), keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return (inv_std[None, :, None] / n) * (n * dxhat - sum_d - xhat * sum_dx)


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, mode=Mode.EVAL):
        mask = x > 0
        if mode is Mode.TRAIN:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        mask = self._take_cache()
        return np.where(mask, dy, 0.0)


class MaxPool1D(Layer):
    """Stride-1 same-padded temporal max pool; pads with -inf.

    Ties route the gradient to the first maximal element of the window.
    """

    kind = "maxpool1d"

    def __init__(self, kernel: int = 3) -> None:
        super().__init__()
        if kernel < 1:
            raise ValueError("maxpool kernel must be positive")
        self.kernel = kernel

    def hyperparams(self) -> dict:
        return {"kernel": self.kernel}

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeMismatch(f"maxpool expects (C, L), got {in_shape}")
        return in_shape

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 3:
            raise ShapeMismatch(f"maxpool expects (B, C, L), got {x.shape}")
        b, c, length = x.shape
        left, right = _pad_lr(self.kernel)
        xp = np.pad(x, ((0, 0), (0, 0), (left, right)), constant_values=-np.inf)
        windows = _sliding(xp, self.kernel)
        if mode is Mode.TRAIN:
            self._cache = (windows.argmax(axis=2), length)
        return windows.max(axis=2)

    def backward(self, dy):
        arg, length = self._take_cache()
        b, c = dy.shape[0], dy.shape[1]
        left, right = _pad_lr(self.kernel)
        dxp = np.zeros((b, c, length + left + right), dtype=dy.dtype)
        for kk in range(self.kernel):
            dxp[:, :, kk : kk + length] += np.where(arg == kk, dy, 0.0)
        return dxp[:, :, left : left + length]


class GlobalAvgPool1D(Layer):
    kind = "gap1d"

    def out_shape(self, in_shape):
        if len(in_shape) != 2:
            raise ShapeMismatch(f"global avg pool expects (C, L), got {in_shape}")
        return (in_shape[0],)

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 3:
            raise ShapeMismatch(f"global avg pool expects (B, C, L), got {x.shape}")
        if mode is Mode.TRAIN:
            self._cache = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy):
        length = self._take_cache()
        return np.repeat(dy[:, :, None], length, axis=2) / length


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, mode=Mode.EVAL):
        if mode is Mode.TRAIN:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        shape = self._take_cache()
        return dy.reshape(shape)


class Softmax(Layer):
    """Row softmax over (B, C); numerically shifted by the row max."""

    kind = "softmax"

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeMismatch(f"softmax expects (C,) features, got {in_shape}")
        return in_shape

    def forward(self, x, mode=Mode.EVAL):
        if x.ndim != 2:
            raise ShapeMismatch(f"softmax expects (B, C), got {x.shape}")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        if mode is Mode.TRAIN:
            self._cache = p
        return p

    def backward(self, dy):
        p = self._take_cache()
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))


class Concat(Layer):
    """Channel-axis concatenation of (B, C_i, L) inputs."""

    kind = "concat"

    def out_shape(self, *in_shapes):
        if not in_shapes:
            raise ShapeMismatch("concat needs at least one input")
        lengths = {s[1] for s in in_shapes}
        if any(len(s) != 2 for s in in_shapes) or len(lengths) != 1:
            raise ShapeMismatch(f"concat needs matching (C, L) inputs, got {in_shapes}")
        return (sum(s[0] for s in in_shapes), in_shapes[0][1])

    def forward(self, *xs, mode=Mode.EVAL):
        if len({(x.shape[0], x.shape[2]) for x in xs}) != 1:
            raise ShapeMismatch(
                f"concat batch/length mismatch: {[x.shape for x in xs]}"
            )
        if mode is Mode.TRAIN:
            self._cache = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, dy):
        channels = self._take_cache()
        splits = np.cumsum(channels)[:-1]
        return tuple(np.split(dy, splits, axis=1))


class Add(Layer):
    """Elementwise sum of two same-shape inputs (residual connection)."""

    kind = "add"

    def out_shape(self, a, b):
        if a != b:
            raise ShapeMismatch(f"add expects matching shapes, got {a} vs {b}")
        return a

    def forward(self, a, b, mode=Mode.EVAL):
        if a.shape != b.shape:
            raise ShapeMismatch(f"add expects matching shapes, got {a.shape} vs {b.shape}")
        if mode is Mode.TRAIN:
            self._cache = True
        return a + b

    def backward(self, dy):
        self._take_cache()
        return (dy, dy)


LAYER_KINDS: dict[str, type[Layer]] = {
    cls.kind: cls
    for cls in (
        Dense, Conv1D, BatchNorm1D, ReLU, MaxPool1D,
        GlobalAvgPool1D, Flatten, Softmax, Concat, Add,
    )
}


# ---------------------------------------------------------------------------
# Graph container
# ---------------------------------------------------------------------------

INPUT_NODE = "input"


@dataclass(frozen=True)
class _Node:
    name: str
    layer: Layer
    inputs: tuple[str, ...]


class ModelGraph:
    """A DAG of named layers with one input and one output.

    Nodes must be added in topological order (each input is either
    ``"input"`` or an already-added node). Shapes are inferred symbolically
    at add time, so miswired architectures fail at construction rather than
    on the first batch. The last added node is the graph output.
    """

    def __init__(self, input_shape: tuple[int, ...], dtype=np.float64) -> None:
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"dtype must be float32 or float64, got {dtype}")
        self.nodes: list[_Node] = []
        self._shapes: dict[str, tuple[int, ...]] = {INPUT_NODE: self.input_shape}
        self._consumers: dict[str, int] = {INPUT_NODE: 0}
        self._trained_forward = False

    def add(self, name: str, layer: Layer, inputs: Sequence[str] | str = INPUT_NODE) -> str:
        if isinstance(inputs, str):
            inputs = (inputs,)
        inputs = tuple(inputs)
        if name in self._shapes:
            raise ValueError(f"duplicate node name {name!r}")
        for inp in inputs:
            if inp not in self._shapes:
                raise ValueError(f"node {name!r} references unknown input {inp!r}")
        self._shapes[name] = layer.out_shape(*(self._shapes[i] for i in inputs))
        self._cast_layer(layer)
        self._consumers[name] = 0
        for inp in inputs:
            self._consumers[inp] += 1
        self.nodes.append(_Node(name=name, layer=layer, inputs=inputs))
        return name

    def _cast_layer(self, layer: Layer) -> None:
        def recast(arrs: list[np.ndarray]) -> list[np.ndarray]:
            return [np.ascontiguousarray(a, dtype=self.dtype) for a in arrs]

        layer.params = recast(layer.params)
        layer.grads = recast(layer.grads)
        layer.state = recast(layer.state)
        # keep the convenience aliases (W, b, gamma, ...) pointing at the
        # recast arrays
        if isinstance(layer, (Dense, Conv1D)):
            layer.W, layer.b = layer.params
        elif isinstance(layer, BatchNorm1D):
            layer.gamma, layer.beta = layer.params
            layer.running_mean, layer.running_var = layer.state

    @property
    def output_name(self) -> str:
        if not self.nodes:
            raise ValueError("graph has no nodes")
        return self.nodes[-1].name

    def node_shapes(self) -> dict[str, tuple[int, ...]]:
        """Inferred per-node output shapes, batch axis omitted."""
        return dict(self._shapes)

    def forward(self, x: np.ndarray, mode: Mode = Mode.EVAL) -> np.ndarray:
        """Run the graph on a (B, *input_shape) batch.

        Intermediate activations are dropped as soon as their last consumer
        has fired, so Eval-mode memory stays proportional to the DAG's
        width rather than its depth. Train mode additionally leaves each
        layer's backward cache populated.
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"graph expects (B, {', '.join(map(str, self.input_shape))}), "
                f"got {x.shape}"
            )
        remaining = dict(self._consumers)
        values: dict[str, np.ndarray] = {INPUT_NODE: x}
        out = x
        for node in self.nodes:
            out = node.layer.forward(*(values[i] for i in node.inputs), mode=mode)
            if not np.isfinite(out).all():
                raise NonFiniteOutput(f"non-finite output at node {node.name!r}")
            values[node.name] = out
            for inp in node.inputs:
                remaining[inp] -= 1
                if remaining[inp] == 0:
                    del values[inp]
        self._trained_forward = mode is Mode.TRAIN
        return out

    def backward(self, d_out: np.ndarray, from_node: str | None = None) -> np.ndarray:
        """Backpropagate d_out from ``from_node`` (default: the output node).

        Requires a preceding Train-mode forward pass. Returns the gradient
        with respect to the graph input; parameter gradients land in each
        layer's ``grads``.
        """
        if not self._trained_forward:
            raise NoCachedForward("graph backward requires a Train-mode forward")
        if from_node is None:
            from_node = self.output_name
        names = [n.name for n in self.nodes]
        if from_node not in names:
            raise ValueError(f"unknown node {from_node!r}")
        start = names.index(from_node)
        pending: dict[str, np.ndarray] = {
            from_node: np.ascontiguousarray(d_out, self.dtype)
        }
        d_input: np.ndarray | None = None
        for node in reversed(self.nodes[: start + 1]):
            if node.name not in pending:
                node.layer._cache = None
                continue
            dins = _as_tuple(node.layer.backward(pending.pop(node.name)))
            if len(dins) != len(node.inputs):
                raise ShapeMismatch(
                    f"node {node.name!r} returned {len(dins)} input grads "
                    f"for {len(node.inputs)} inputs"
                )
            for inp, d in zip(node.inputs, dins):
                if inp == INPUT_NODE:
                    d_input = d if d_input is None else d_input + d
                elif inp in pending:
                    pending[inp] = pending[inp] + d
                else:
                    pending[inp] = d
        for node in self.nodes[start + 1 :]:
            node.layer._cache = None
        self._trained_forward = False
        if d_input is None:
            raise ValueError(f"node {from_node!r} is not connected to the input")
        return d_input

    def parameters(self) -> list[np.ndarray]:
        return [p for node in self.nodes for p in node.layer.params]

    def gradients(self) -> list[np.ndarray]:
        return [g for node in self.nodes for g in node.layer.grads]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def he_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(graph: ModelGraph, rng: np.random.Generator) -> None:
    """He-uniform fan-in init for weights, zeros for biases, identity for BN.

    Draws happen in node order, so a fixed rng seed pins every parameter.
    """
    for node in graph.nodes:
        layer = node.layer
        if isinstance(layer, Dense):
            layer.W[...] = he_uniform(rng, layer.in_dim, layer.W.shape)
            layer.b[...] = 0.0
        elif isinstance(layer, Conv1D):
            fan_in = layer.in_channels * layer.kernel
            layer.W[...] = he_uniform(rng, fan_in, layer.W.shape)
            layer.b[...] = 0.0
        elif isinstance(layer, BatchNorm1D):
            layer.gamma[...] = 1.0
            layer.beta[...] = 0.0
            layer.running_mean[...] = 0.0
            layer.running_var[...] = 1.0


# ---------------------------------------------------------------------------
# Label-smoothed cross-entropy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    """Label-smoothing factor and class count for the training loss."""

    epsilon: float = 0.1
    num_classes: int = 2

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


def smoothed_labels(y: int, cfg: LossConfig) -> np.ndarray:
    """Smoothed target vector: 1 - eps at the true class, eps/(C-1) elsewhere.

    The last component is set to the complement of the others, so the
    final addition of a left-to-right sum is also the final rounding step
    and np.sum(q) is exactly 1.0. Nudging the true-class entry instead
    cannot guarantee that: the rounded total can step over 1.0.
    """
    c = cfg.num_classes
    if not 0 <= y < c:
        raise ValueError(f"label {y} out of range for {c} classes")
    q = np.full(c, cfg.epsilon / (c - 1), dtype=np.float64)
    q[y] = 1.0 - cfg.epsilon
    q[-1] = 1.0 - np.sum(q[:-1])
    return q


def smoothed_label_matrix(labels: np.ndarray, cfg: LossConfig) -> np.ndarray:
    labels = np.asarray(labels)
    rows = np.arange(labels.shape[0])
    q = np.full((labels.shape[0], cfg.num_classes),
                cfg.epsilon / (cfg.num_classes - 1), dtype=np.float64)
    q[rows, labels] = 1.0 - cfg.epsilon
    q[:, -1] = 1.0 - np.sum(q[:, :-1], axis=1)  # same scheme as the vector
    return q


def _check_probs_labels(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> tuple:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[1] != cfg.num_classes:
        raise ShapeMismatch(
            f"probs must be (B, {cfg.num_classes}), got {probs.shape}"
        )
    if labels.shape != (probs.shape[0],):
        raise ShapeMismatch(
            f"labels must be ({probs.shape[0]},), got {labels.shape}"
        )
    if probs.shape[0] == 0:
        raise ValueError("empty batch")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1")
    if labels.min() < 0 or labels.max() >= cfg.num_classes:
        raise ValueError("labels out of class range")
    return probs, labels


def label_smoothed_ce(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> float:
    """Mean over the batch of -sum_i q_i log p_i with smoothed targets q.

    Probabilities are floored at 1e-12 inside the log for stability.
    """
    probs, labels = _check_probs_labels(probs, labels, cfg)
    q = smoothed_label_matrix(labels, cfg)
    loss = float(-(q * np.log(np.maximum(probs, LOG_FLOOR))).sum(axis=1).mean())
    if not np.isfinite(loss):
        raise NonFiniteOutput("label_smoothed_ce produced a non-finite loss")
    return loss


def ce_logit_grad(probs: np.ndarray, labels: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Gradient of the loss with respect to pre-softmax logits: (p - q) / B.

    This is the closed form of backpropagating the mean label-smoothed
    cross-entropy through a row softmax, so training injects it directly at
    the softmax node's input.
    """
    probs, labels = _check_probs_labels(probs, labels, cfg)
    q = smoothed_label_matrix(labels, cfg)
    return (probs - q) / probs.shape[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; eps is added outside the square root."""

    def __init__(
        self,
        params: Iterable[np.ndarray],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps_hat: float = 1e-8,
    ) -> None:
        self.params = list(params)
        if not self.params:
            raise ValueError("no parameters to optimize")
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_hat = eps_hat
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        """Update all parameters in place from aligned gradients."""
        if len(grads) != len(self.params):
            raise ValueError(
                f"got {len(grads)} gradients for {len(self.params)} parameters"
            )
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeMismatch(
                    f"gradient shape {g.shape} does not match parameter {p.shape}"
                )
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p -= (self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps_hat)).astype(
                p.dtype, copy=False
            )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(graph: ModelGraph, path: str | Path) -> None:
    """Write architecture plus parameters to a single .npz file.

    Arrays are stored as little-endian float64 regardless of the model's
    compute dtype; the JSON header records wiring, hyperparameters, and the
    dtype to restore.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "dtype": graph.dtype.name,
        "nodes": [
            {
                "name": n.name,
                "kind": n.layer.kind,
                "inputs": list(n.inputs),
                "hyper": n.layer.hyperparams(),
            }
            for n in graph.nodes
        ],
    }
    entries: dict[str, np.ndarray] = {
        "__meta__": np.array(json.dumps(meta, sort_keys=True))
    }
    for i, node in enumerate(graph.nodes):
        for j, p in enumerate(node.layer.params):
            entries[f"param_{i:03d}_{j}"] = p.astype("<f8")
        for j, s in enumerate(node.layer.state):
            entries[f"state_{i:03d}_{j}"] = s.astype("<f8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **entries)


def load_model(path: str | Path) -> ModelGraph:
    """Rebuild a ModelGraph saved by :func:`save_model`."""
    with np.load(path, allow_pickle=False) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path}: not a model checkpoint (missing header)")
        meta = json.loads(str(archive["__meta__"]))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint format version {version!r}"
            )
        graph = ModelGraph(tuple(meta["input_shape"]), dtype=meta["dtype"])
        for spec in meta["nodes"]:
            kind = spec["kind"]
            if kind not in LAYER_KINDS:
                raise ValueError(f"{path}: unknown layer kind {kind!r}")
            layer = LAYER_KINDS[kind](**spec["hyper"])
            graph.add(spec["name"], layer, tuple(spec["inputs"]))
        for i, node in enumerate(graph.nodes):
            for j, p in enumerate(node.layer.params):
                p[...] = archive[f"param_{i:03d}_{j}"].astype(graph.dtype)
            for j, s in enumerate(node.layer.state):
                s[...] = archive[f"state_{i:03d}_{j}"].astype(graph.dtype)
    return graph
