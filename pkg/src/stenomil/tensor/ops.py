"""Differentiable layer and loss kernels.

Convolutions are cross-correlations computed by im2col + matmul and accept
an optional leading batch axis: ``conv3d`` takes ``(C, D, H, W)`` or
``(N, C, D, H, W)``; ``conv1d`` takes ``(C, L)`` or ``(N, C, L)``.
Transposed convolutions are the exact adjoint of the forward map with the
same kernel tensor (shape ``[K, C, *k]``).
"""

from __future__ import annotations

from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, as_tensor

EPS_PROB = 1e-7


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def conv_output_shape(in_shape, kernel, stride, pad) -> tuple[int, ...]:
    return tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip(in_shape, kernel, stride, pad))


def _pad(x: np.ndarray, pad: tuple[int, ...]) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pad])


def _im2col(xp: np.ndarray, k: tuple[int, ...], stride: tuple[int, ...]) -> tuple[np.ndarray, tuple[int, ...]]:
    s = len(k)
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, k, axis=tuple(range(2, 2 + s)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, st) for st in stride)]
    out_sp = win.shape[2 : 2 + s]
    perm = (0,) + tuple(range(2, 2 + s)) + (1,) + tuple(range(2 + s, 2 + 2 * s))
    cols = win.transpose(perm).reshape(n * prod(out_sp), c * prod(k))
    return cols, out_sp


def _col2im(
    dcols: np.ndarray,
    x_shape: tuple[int, ...],
    k: tuple[int, ...],
    stride: tuple[int, ...],
    pad: tuple[int, ...],
    out_sp: tuple[int, ...],
) -> np.ndarray:
    """Scatter-add columns back onto an input-shaped array (adjoint of im2col)."""
    s = len(k)
    n, c = x_shape[:2]
    padded = (n, c) + tuple(d + 2 * p for d, p in zip(x_shape[2:], pad))
    out = np.zeros(padded, dtype=dcols.dtype)
    d = dcols.reshape((n,) + out_sp + (c,) + k)
    # (N, *O, C, *k) -> (*k, N, C, *O)
    perm = tuple(range(2 + s, 2 + 2 * s)) + (0, 1 + s) + tuple(range(1, 1 + s))
    d = d.transpose(perm)
    for off in np.ndindex(*k):
        sl = tuple(slice(o, o + st * (no - 1) + 1, st) for o, st, no in zip(off, stride, out_sp))
        out[(slice(None), slice(None)) + sl] += d[off]
    core = tuple(slice(p, p + dim) for p, dim in zip(pad, x_shape[2:]))
    return out[(slice(None), slice(None)) + core]


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride, pad, s: int, name: str) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == s + 1
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != s + 2 or w.ndim != s + 2:
        raise ValueError(f"{name}: input {x.shape} / kernels {w.shape} have wrong rank")
    k = w.shape[2:]
    stride, pad = _tuple(stride, s), _tuple(pad, s)
    if xd.shape[1] != w.shape[1]:
        raise ValueError(f"{name}: input has {xd.shape[1]} channels, kernels expect {w.shape[1]} (input {x.shape}, kernels {w.shape})")
    padded_sp = tuple(d + 2 * p for d, p in zip(xd.shape[2:], pad))
    if any(kk > d for kk, d in zip(k, padded_sp)):
        raise ValueError(f"{name}: kernel extents {k} exceed padded input extents {padded_sp} (input {x.shape})")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"{name}: bias shape {b.shape} != ({w.shape[0]},)")

    cols, out_sp = _im2col(_pad(xd, pad), k, stride)
    wmat = w.data.reshape(w.shape[0], -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    n = xd.shape[0]
    res = out.reshape((n,) + out_sp + (w.shape[0],))
    res = np.moveaxis(res, -1, 1)
    if unbatched:
        res = res[0]
    x_shape = xd.shape
    need_x = x.requires_grad

    def bw(g):
        g = g[None] if unbatched else g
        gmat = np.moveaxis(g, 1, -1).reshape(-1, w.shape[0])
        dw = (gmat.T @ cols).reshape(w.shape)
        dx = None
        if need_x:
            dx = _col2im(gmat @ wmat, x_shape, k, stride, pad, out_sp)
            if unbatched:
                dx = dx[0]
        grads = [dx, dw]
        if b is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, as_tensor(b))
    return Tensor.from_op(np.ascontiguousarray(res), parents, bw, name)


def _conv_transpose_nd(y: Tensor, w: Tensor, b: Tensor | None, stride, pad, output_padding, s: int, name: str) -> Tensor:
    y, w = as_tensor(y), as_tensor(w)
    unbatched = y.ndim == s + 1
    yd = y.data[None] if unbatched else y.data
    if yd.ndim != s + 2 or w.ndim != s + 2:
        raise ValueError(f"{name}: input {y.shape} / kernels {w.shape} have wrong rank")
    if yd.shape[1] != w.shape[0]:
        raise ValueError(f"{name}: input has {yd.shape[1]} channels, kernels expect {w.shape[0]} (input {y.shape}, kernels {w.shape})")
    k = w.shape[2:]
    stride, pad, opad = _tuple(stride, s), _tuple(pad, s), _tuple(output_padding, s)
    out_sp = yd.shape[2:]
    x_sp = tuple((o - 1) * st - 2 * p + kk + op for o, st, p, kk, op in zip(out_sp, stride, pad, k, opad))
    if any(v <= 0 for v in x_sp) or conv_output_shape(x_sp, k, stride, pad) != tuple(out_sp):
        raise ValueError(f"{name}: no valid output extents for input {y.shape}, kernels {w.shape}, stride {stride}, pad {pad}")
    n = yd.shape[0]
    x_shape = (n, w.shape[1]) + x_sp
    wmat = w.data.reshape(w.shape[0], -1)
    ymat = np.moveaxis(yd, 1, -1).reshape(-1, w.shape[0])
    res = _col2im(ymat @ wmat, x_shape, k, stride, pad, tuple(out_sp))
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"{name}: bias shape {b.shape} != ({w.shape[1]},)")
        res = res + b.data.reshape((1, -1) + (1,) * s)
    if unbatched:
        res = res[0]

    def bw(g):
        g = g[None] if unbatched else g
        cols, _ = _im2col(_pad(g, pad), k, stride)
        dy = (cols @ wmat.T).reshape((n,) + tuple(out_sp) + (w.shape[0],))
        dy = np.moveaxis(dy, -1, 1)
        dw = (ymat.T @ cols).reshape(w.shape)
        if unbatched:
            dy = dy[0]
        grads = [dy, dw]
        if b is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + s))))
        return grads

    parents = (y, w) if b is None else (y, w, as_tensor(b))
    return Tensor.from_op(res, parents, bw, name)


def conv3d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """3-D cross-correlation; output extent per axis is ``(in + 2*pad - k) // stride + 1``."""
    return _conv_nd(x, kernels, bias, stride, pad, 3, "conv3d")


def conv1d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    return _conv_nd(x, kernels, bias, stride, pad, 1, "conv1d")


def conv3d_transposed(y, kernels, bias=None, stride=1, pad=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(y, kernels, bias, stride, pad, output_padding, 3, "conv3d_transposed")


def conv1d_transposed(y, kernels, bias=None, stride=1, pad=0, output_padding=0) -> Tensor:
    return _conv_transpose_nd(y, kernels, bias, stride, pad, output_padding, 1, "conv1d_transposed")


def dense(x, weights, bias=None) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape ``(n,)`` or ``(B, n)``."""
    x, weights = as_tensor(x), as_tensor(weights)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ValueError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if x.ndim == 1:
        out = (x.reshape(1, -1) @ weights.T).reshape(-1)
    else:
        out = x @ weights.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
        out = out + bias
    return out


def prelu(x, slopes, axis: int = -1) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``, one slope per channel along ``axis``."""
    x, slopes = as_tensor(x), as_tensor(slopes)
    ax = axis % x.ndim
    if slopes.shape != (x.shape[ax],):
        raise ValueError(f"prelu: {slopes.shape[0] if slopes.ndim else 1} slopes for {x.shape[ax]} channels")
    bshape = [1] * x.ndim
    bshape[ax] = -1
    a = slopes.data.reshape(bshape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)
    other_axes = tuple(i for i in range(x.ndim) if i != ax)

    def bw(g):
        dx = np.where(neg, g * a, g)
        da = (g * x.data * neg).sum(axis=other_axes)
        return dx, da

    return Tensor.from_op(out, (x, slopes), bw, "prelu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), bw, "softmax")


def sigmoid(x) -> Tensor:
    return as_tensor(x).sigmoid()


def tanh(x) -> Tensor:
    return as_tensor(x).tanh()


def bce_loss(p, y, eps: float = EPS_PROB) -> Tensor:
    """Binary cross-entropy of probabilities ``p`` against labels ``y`` (mean over elements)."""
    p = as_tensor(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = p.clip(eps, 1.0 - eps)
    loss = -(pc.log() * y + (1.0 - pc).log() * (1.0 - y))
    return loss.mean()


def gaussian_kl(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over the last axis, averaged over leading axes."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"gaussian_kl: mu {mu.shape} vs logvar {logvar.shape}")
    terms = (logvar + 1.0) - mu * mu - logvar.exp()
    per_sample = terms.sum(axis=-1) * -0.5
    return per_sample.mean() if per_sample.ndim else per_sample


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(target, dtype=pred.dtype)
    return (diff * diff).mean()


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: identity at inference, unbiased in expectation at training."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
