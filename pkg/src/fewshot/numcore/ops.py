"""Differentiable operations on :class:`Tensor`.

Elementwise ops broadcast like numpy; their backward passes sum the
upstream gradient back down to each operand's shape. The neural kernels
(conv, pooling, batch norm) and the losses are fused ops with hand-written
backward passes.
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ShapeError, StateError, Tensor, make_result

BCE_EPS = 1e-7
L2_EPS = 1e-12


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise algebra -------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return make_result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return make_result(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return make_result(-a.data, (a,), backward, "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return make_result(out, (a,), backward, "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return make_result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return make_result(out, (a,), backward, "log")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def backward(g):
        mask = np.ones_like(a.data, dtype=bool)
        if lo is not None:
            mask &= a.data >= lo
        if hi is not None:
            mask &= a.data <= hi
        a._accumulate(g * mask)

    return make_result(out, (a,), backward, "clamp")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g):
        # subgradient at exactly 0 is 0
        a._accumulate(g * (a.data > 0))

    return make_result(out, (a,), backward, "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        a._accumulate(g * out * (1.0 - out))

    return make_result(out, (a,), backward, "sigmoid")


# --- reductions and reshaping ---------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return make_result(out, (a,), backward, "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inv))

    return make_result(out, (a,), backward, "transpose")


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a._accumulate(full)

    return make_result(np.array(out, copy=True), (a,), backward, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [builtins.slice(None)] * g.ndim
                sl[axis] = builtins.slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return make_result(out, tensors, backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (m,k)@(k,n), got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return make_result(out, (a, b), backward, "matmul")


# --- neural kernels -------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape} (axis 1 must match)")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return make_result(out, parents, backward, "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input, computed as one GEMM on im2col patches."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels (axis 1) {Cin} != weight in-channels (axis 1) {Cin_w}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding} (axes 2,3)")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)

    # channel-last padded copy; patch columns are ordered (ki, kj, cin)
    xp = np.transpose(x.data, (0, 2, 3, 1))
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = np.ascontiguousarray(xp)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.concatenate(
        [xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] for i, j in offsets], axis=-1
    ).reshape(B * Ho * Wo, kh * kw * Cin)
    wmat = np.ascontiguousarray(np.transpose(weight.data, (0, 2, 3, 1))).reshape(Cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        if weight.requires_grad:
            dw = (g2.T @ cols).reshape(Cout, kh, kw, Cin)
            weight._accumulate(np.ascontiguousarray(dw.transpose(0, 3, 1, 2)))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh * kw, Cin)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for n, (i, j) in enumerate(offsets):
                dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, n, :]
            if padding:
                dxp = dxp[:, padding:-padding, padding:-padding, :]
            x._accumulate(np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)))

    return make_result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; gradient goes to the first argmax of each window."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if H < k or W < k:
        raise ShapeError(f"maxpool2d: window {k} larger than input {H}x{W} (axes 2,3)")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, k)
        for i in range(k):
            for j in range(k):
                sel = (di == i) & (dj == j)
                dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride][:, :, :Ho, :Wo] += g * sel
        x._accumulate(dx)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    dtype: type = np.float32
    running_mean: np.ndarray = field(init=False)
    running_var: np.ndarray = field(init=False)
    initialized: bool = False

    def __post_init__(self):
        self.running_mean = np.zeros(self.num_features, dtype=self.dtype)
        self.running_var = np.ones(self.num_features, dtype=self.dtype)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if C != state.num_features or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm2d: channel axis 1 has {C}, layer expects {state.num_features}")
    eps = state.eps
    gshape = (1, C, 1, 1)
    if mode == "train":
        n = B * H * W
        if n < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu
        state.running_var[...] = (1 - m) * state.running_var + m * var * (n / (n - 1))
        state.initialized = True
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(gshape)) * inv.reshape(gshape)
        out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = g * gamma.data.reshape(gshape)
                mg = gx.mean(axis=(0, 2, 3), keepdims=True)
                mgx = (gx * xhat).mean(axis=(0, 2, 3), keepdims=True)
                x._accumulate((gx - mg - xhat * mgx) * inv.reshape(gshape))

    elif mode == "eval":
        if not state.initialized:
            raise StateError("batchnorm2d: eval mode before any train step; running statistics are uninitialized")
        inv = 1.0 / np.sqrt(state.running_var + eps)
        scale = (gamma.data * inv).reshape(gshape)
        xhat = (x.data - state.running_mean.reshape(gshape)) * inv.reshape(gshape)
        out = x.data * scale + (beta.data - state.running_mean * gamma.data * inv).reshape(gshape)

        def backward(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                x._accumulate(g * scale)

    else:
        raise ConfigError(f"batchnorm2d: unknown mode {mode!r}")
    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batchnorm2d")


# --- normalisation, distances, softmax ------------------------------------

def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        logits._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return make_result(out, (logits,), backward, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        logits._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return make_result(out, (logits,), backward, "log_softmax")


def l2_normalize(v: Tensor) -> Tensor:
    """Row-wise unit normalisation; zero rows map to zero."""
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize expects (B,D), got {v.shape}")
    norm = np.sqrt((v.data * v.data).sum(axis=1, keepdims=True))
    den = norm + L2_EPS
    out = v.data / den

    def backward(g):
        dot = (g * v.data).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        corr = np.where(norm > 0, v.data * dot / (safe * den * den), 0.0)
        v._accumulate(g / den - corr)

    return make_result(out, (v,), backward, "l2_normalize")


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """(Q,D) x (N,D) -> (Q,N) squared Euclidean distances."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sq_dist: feature axis 1 mismatch {a.shape} vs {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = (diff * diff).sum(axis=2)

    def backward(g):
        gd = 2.0 * g[:, :, None] * diff
        if a.requires_grad:
            a._accumulate(gd.sum(axis=1))
        if b.requires_grad:
            b._accumulate(-gd.sum(axis=0))

    return make_result(out, (a, b), backward, "pairwise_sq_dist")


# --- losses ----------------------------------------------------------------

def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits)."""
    targets = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    N = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= N):
        raise IndexError(f"cross_entropy: target out of range [0, {N})")
    B = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    out = np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits._accumulate(g * p / B)

    return make_result(out, (logits,), backward, "cross_entropy")


def nll_from_probs(probs: Tensor, targets, eps: float = BCE_EPS) -> Tensor:
    """Mean -log p[target] for rows that are already probability vectors."""
    targets = np.asarray(targets, dtype=np.intp)
    B = probs.shape[0]
    picked = index(probs, (np.arange(B), targets))
    return neg(mean(log(clamp(picked, eps, None))))


def binary_cross_entropy(p: Tensor, y) -> Tensor:
    y = _wrap(y, p)
    if p.shape != y.shape:
        raise ShapeError(f"binary_cross_entropy: p {p.shape} vs y {y.shape}")
    pc = clamp(p, BCE_EPS, 1.0 - BCE_EPS)
    ones = 1.0
    terms = y * log(pc) + (ones - y) * log(ones - pc)
    return neg(mean(terms))


def triplet_loss(d_pos: Tensor, d_neg: Tensor, margin: float = 1.0) -> Tensor:
    if margin < 0:
        raise ConfigError(f"triplet margin must be non-negative, got {margin}")
    if d_pos.shape != d_neg.shape:
        raise ShapeError(f"triplet_loss: d_pos {d_pos.shape} vs d_neg {d_neg.shape}")
    return mean(relu(d_pos - d_neg + margin))
