"""Builders for the three window classifiers (MLP, FCN, InceptionTime).

All models take a (batch, 3, L) window and emit (batch, 2) class
probabilities through a final softmax. Weights are initialized He-uniform
by fan-in with zero biases and identity batch norm, so a fresh model starts
near the uniform output. Builders are pure: the same arguments and rng
state produce the same graph.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import (
    Add,
    BatchNorm1D,
    Concat,
    Conv1D,
    Dense,
    Flatten,
    GlobalAvgPool1D,
    MaxPool1D,
    ModelGraph,
    ReLU,
    Softmax,
    init_parameters,
)

INPUT_CHANNELS = 3
NUM_CLASSES = 2

INCEPTION_DEPTH = 6
INCEPTION_FILTERS = 32
INCEPTION_BOTTLENECK = 32
INCEPTION_KERNELS = (40, 20, 10)

MODEL_NAMES = ("mlp", "fcn", "inception")


class WindowTooShort(ValueError):
    """Window length below the architecture's minimum."""


def _finish(graph: ModelGraph, rng: np.random.Generator | None) -> ModelGraph:
    init_parameters(graph, rng if rng is not None else np.random.default_rng(0))
    return graph


def build_mlp(
    window_len: int,
    *,
    dtype=np.float64,
    rng: np.random.Generator | None = None,
) -> ModelGraph:
    """Flatten -> two ReLU hidden layers at half the flattened width -> softmax.

    Flattening is channel-major: the full x series, then y, then z.
    """
    if window_len < 2:
        raise ValueError(f"window_len must be >= 2, got {window_len}")
    flat = INPUT_CHANNELS * window_len
    hidden = flat // 2
    g = ModelGraph((INPUT_CHANNELS, window_len), dtype=dtype)
    g.add("flatten", Flatten())
    g.add("dense1", Dense(flat, hidden), "flatten")
    g.add("relu1", ReLU(), "dense1")
    g.add("dense2", Dense(hidden, hidden), "relu1")
    g.add("relu2", ReLU(), "dense2")
    g.add("logits", Dense(hidden, NUM_CLASSES), "relu2")
    g.add("probs", Softmax(), "logits")
    return _finish(g, rng)


def build_fcn(
    window_len: int,
    *,
    dtype=np.float64,
    rng: np.random.Generator | None = None,
) -> ModelGraph:
    """Three conv/batch-norm/ReLU stages {128, 256, 128} with kernels {8, 5, 3},
    global average pooling, and a softmax head."""
    if window_len < 8:
        raise WindowTooShort(f"fcn needs window_len >= 8, got {window_len}")
    g = ModelGraph((INPUT_CHANNELS, window_len), dtype=dtype)
    prev = "input"
    for i, (ch_in, ch_out, k) in enumerate(
        [(INPUT_CHANNELS, 128, 8), (128, 256, 5), (256, 128, 3)], start=1
    ):
        g.add(f"conv{i}", Conv1D(ch_in, ch_out, k), prev)
        g.add(f"bn{i}", BatchNorm1D(ch_out), f"conv{i}")
        g.add(f"relu{i}", ReLU(), f"bn{i}")
        prev = f"relu{i}"
    g.add("gap", GlobalAvgPool1D(), prev)
    g.add("logits", Dense(128, NUM_CLASSES), "gap")
    g.add("probs", Softmax(), "logits")
    return _finish(g, rng)


def build_inception(
    window_len: int,
    depth: int = INCEPTION_DEPTH,
    filters: int = INCEPTION_FILTERS,
    bottleneck: int = INCEPTION_BOTTLENECK,
    kernels: Sequence[int] = INCEPTION_KERNELS,
    *,
    dtype=np.float64,
    rng: np.random.Generator | None = None,
) -> ModelGraph:
    """Stacked inception modules with residual connections every third module.

    Each module: a k=1 bottleneck feeding three parallel convolutions (the
    given kernels, clipped to L-1 for short windows) plus a
    max-pool(3)/k=1-conv branch on the module input; branch outputs are
    concatenated to 4*filters channels, then batch-normalized and ReLU'd.
    Every third module adds a shortcut from the running residual source
    (projected with a k=1 convolution when channel counts differ) followed
    by a ReLU, as in the reference InceptionTime implementation. A global
    average pool and softmax head finish the network.
    """
    if window_len < 2:
        raise WindowTooShort(f"inception needs window_len >= 2, got {window_len}")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if len(kernels) != 3:
        raise ValueError(f"expected 3 branch kernels, got {kernels!r}")
    kernels = tuple(min(int(k), window_len - 1) for k in kernels)
    if min(kernels) < 1 or filters < 1 or bottleneck < 1:
        raise ValueError("kernels, filters and bottleneck must be positive")

    g = ModelGraph((INPUT_CHANNELS, window_len), dtype=dtype)
    prev = "input"
    prev_ch = INPUT_CHANNELS
    residual_src = "input"
    residual_ch = INPUT_CHANNELS
    out_ch = 4 * filters

    for m in range(1, depth + 1):
        bott = g.add(f"m{m}_bottleneck", Conv1D(prev_ch, bottleneck, 1), prev)
        branches = []
        for j, k in enumerate(kernels, start=1):
            branches.append(
                g.add(f"m{m}_conv{j}", Conv1D(bottleneck, filters, k), bott)
            )
        pool = g.add(f"m{m}_pool", MaxPool1D(3), prev)
        branches.append(
            g.add(f"m{m}_poolconv", Conv1D(prev_ch, filters, 1), pool)
        )
        g.add(f"m{m}_concat", Concat(), branches)
        g.add(f"m{m}_bn", BatchNorm1D(out_ch), f"m{m}_concat")
        block = g.add(f"m{m}_relu", ReLU(), f"m{m}_bn")

        if m % 3 == 0:
            if residual_ch != out_ch:
                residual_src = g.add(
                    f"m{m}_shortcut",
                    Conv1D(residual_ch, out_ch, 1),
                    residual_src,
                )
            g.add(f"m{m}_add", Add(), (block, residual_src))
            block = g.add(f"m{m}_postrelu", ReLU(), f"m{m}_add")
            residual_src = block
            residual_ch = out_ch

        prev = block
        prev_ch = out_ch

    g.add("gap", GlobalAvgPool1D(), prev)
    g.add("logits", Dense(out_ch, NUM_CLASSES), "gap")
    g.add("probs", Softmax(), "logits")
    return _finish(g, rng)


def build_model(
    name: str,
    window_len: int,
    *,
    dtype=np.float64,
    rng: np.random.Generator | None = None,
    inception_depth: int = INCEPTION_DEPTH,
    inception_filters: int = INCEPTION_FILTERS,
    inception_bottleneck: int = INCEPTION_BOTTLENECK,
    inception_kernels: Sequence[int] = INCEPTION_KERNELS,
) -> ModelGraph:
    """Build a classifier by CLI name: one of mlp, fcn, inception."""
    if name == "mlp":
        return build_mlp(window_len, dtype=dtype, rng=rng)
    if name == "fcn":
        return build_fcn(window_len, dtype=dtype, rng=rng)
    if name == "inception":
        return build_inception(
            window_len,
            depth=inception_depth,
            filters=inception_filters,
            bottleneck=inception_bottleneck,
            kernels=inception_kernels,
            dtype=dtype,
            rng=rng,
        )
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
