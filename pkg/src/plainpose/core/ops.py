"""Differentiable network primitives over channel-last (N, H, W, C) tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import _kernels
from .tensor import ShapeError, Tensor, as_tensor, make

_GELU_C = math.sqrt(2.0 / math.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return make(out, (a, b), backward, "matmul")


def _sum_to(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape[:-2]):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (w is in_features x out_features)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out.reshape(*lead, w.shape[1]), parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for {x.ndim}-d input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: channel dim {c} vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), backward, "layer_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner
        return (g * d,)

    return make(out, (x,), backward, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation. ``x`` is N x H x W x Cin, ``w`` is kh x kw x Cin x Cout."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if h + 2 * pad < kh or wd + 2 * pad < kw or stride < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit padded input {h}x{wd} (pad {pad})")
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    cols = _kernels.im2col(xp, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * cin)
    w2 = w.data.reshape(kh * kw * cin, cout)
    out = cols @ w2
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
        gxp = _kernels.col2im(dcols, h + 2 * pad, wd + 2 * pad, stride)
        gx = gxp[:, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(out.reshape(n, ho, wo, cout), parents, backward, "conv2d")


def transposed_conv2d(
    x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, pad: int = 1
) -> Tensor:
    """Transposed convolution (the input-gradient of :func:`conv2d`).

    ``w`` is kh x kw x Cin x Cout. Output size is ``(H - 1) * stride - 2 * pad + kh``,
    which doubles H for the default kernel 4 / stride 2 / pad 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"transposed_conv2d: input has {cin} channels, weight expects {wcin}")
    hp = (h - 1) * stride + kh
    wp = (wd - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError("transposed_conv2d: padding removes the whole output")
    x2 = x.data.reshape(n * h * wd, cin)
    # weight as (Cin, kh*kw*Cout) so the columns line up with conv2d's (kh, kw, C) layout
    wt = w.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
    cols = (x2 @ wt).reshape(n, h, wd, kh, kw, cout)
    full = _kernels.col2im(cols, hp, wp, stride)
    out = full[:, pad : pad + ho, pad : pad + wo]
    if b is not None:
        out = out + b.data

    def backward(g):
        gp = np.pad(g, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else g
        gcols = _kernels.im2col(gp, kh, kw, stride, h, wd).reshape(n * h * wd, kh * kw * cout)
        gx = (gcols @ wt.T).reshape(x.shape)
        gwt = x2.T @ gcols
        gw = gwt.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        gb = g.sum(axis=(0, 1, 2)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make(np.ascontiguousarray(out), parents, backward, "transposed_conv2d")


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear-interpolation matrix (n_out x n_in), half-pixel convention.

    Output sample ``o`` reads source position ``(o + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    m = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, scale: int | None = 4, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear resampling of an N x H x W x C tensor by an integer scale or to ``size``."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects N x H x W x C, got {x.shape}")
    _, h, w, _ = x.shape
    if size is None:
        if scale is None or scale < 1 or int(scale) != scale:
            raise ValueError("bilinear_resize: scale must be an integer >= 1")
        size = (h * int(scale), w * int(scale))
    ah = interp_matrix(h, size[0]).astype(x.dtype)
    aw = interp_matrix(w, size[1]).astype(x.dtype)
    out = np.einsum("oh,nhwc->nowc", ah, x.data)
    out = np.einsum("pw,nowc->nopc", aw, out)

    def backward(g):
        gx = np.einsum("pw,nopc->nowc", aw, g)
        return (np.einsum("oh,nowc->nhwc", ah, gx),)

    return make(out, (x,), backward, "bilinear_resize")


# --------------------------------------------------------------------------
# normalisation
# --------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> RunningStats:
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch norm over all leading axes (channel-last).

    Train mode normalises with the biased batch variance and folds the unbiased
    variance into ``running`` in place. Eval mode only reads ``running``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: channel dim {c} vs gamma {gamma.shape}")
    red = tuple(range(x.ndim - 1))
    m = int(np.prod([x.shape[a] for a in red]))
    if m == 0:
        raise ShapeError("batch_norm: empty batch")
    if mode == "eval":
        rstd = 1.0 / np.sqrt(running.var + eps)
        scale = (gamma.data * rstd).astype(x.dtype)
        shift = (beta.data - running.mean * gamma.data * rstd).astype(x.dtype)
        xhat = (x.data - running.mean) * rstd
        out = x.data * scale + shift

        def backward_eval(g):
            return g * scale, (g * xhat).sum(axis=red), g.sum(axis=red)

        return make(out, (x, gamma, beta), backward_eval, "batch_norm")
    if mode != "train":
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    mu = x.data.mean(axis=red)
    xc = x.data - mu
    var = (xc * xc).mean(axis=red)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    unbiased = var * m / max(m - 1, 1)
    running.mean[...] = (1 - momentum) * running.mean + momentum * mu
    running.var[...] = (1 - momentum) * running.var + momentum * unbiased

    def backward(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxh = g * gamma.data
        gx = rstd * (gxh - gxh.mean(axis=red) - xhat * (gxh * xhat).mean(axis=red))
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), backward, "batch_norm")


def affine_channel(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift; the small-batch stand-in for batch norm."""
    return x * gamma + beta


# --------------------------------------------------------------------------
# losses and regularisers
# --------------------------------------------------------------------------


def mse(a: Tensor, b) -> Tensor:
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def backward(g):
        gd = (2.0 / n) * g * diff
        return gd, -gd

    return make(out, (a, b), backward, "mse")


def weighted_mse(a: Tensor, target: np.ndarray, weight: np.ndarray) -> Tensor:
    """Mean over all cells of ``weight * (a - target)^2``; weight broadcasts over space."""
    diff = a.data - target
    w = np.broadcast_to(weight, diff.shape)
    n = diff.size
    out = np.asarray((w * diff * diff).sum() / n, dtype=a.dtype)
    return make(out, (a,), lambda g: ((2.0 / n) * g * w * diff,), "weighted_mse")


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Stochastic depth on a residual branch, per sample along axis 0.

    Kept samples are scaled by ``1 / keep`` at train time so eval is a no-op.
    """
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return x * Tensor(mask)
