"""Convolutional building blocks: kernels on arrays plus their tape ops.

Array kernels take batched ``[N, C, H, W]`` input; single ``[C, H, W]`` maps
are accepted by the public array functions and returned unbatched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Node
from .tensor import ShapeError

log = logging.getLogger(__name__)

IGNORE_LABEL = 255


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConvConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilation: int = 1
    padding: str = "same"  # "same" | "valid"

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.dilation < 1:
            raise ConfigError(f"invalid conv config {self}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"unknown padding mode {self.padding!r}")
        if self.padding == "same" and self.kernel % 2 == 0:
            raise ConfigError("same-size padding needs an odd kernel")

    @property
    def pad(self) -> int:
        return self.dilation * (self.kernel - 1) // 2 if self.padding == "same" else 0

    @property
    def extent(self) -> int:
        """Spatial span of one dilated kernel."""
        return (self.kernel - 1) * self.dilation + 1

    def out_size(self, n: int) -> int:
        return (n + 2 * self.pad - self.extent) // self.stride + 1


@dataclass(frozen=True)
class NormConfig:
    """Feature normalization applied before multi-layer concatenation.

    Batch statistics are taken per channel over the ``N_f x H_f x W_f``
    samples of an ``N_f x C_f x H_f x W_f`` minibatch.
    """

    mode: str = "none"  # "batch" | "l2" | "none"
    scale: float | None = 1000.0
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        if self.mode not in ("batch", "l2", "none"):
            raise ConfigError(f"unknown norm mode {self.mode!r}")
        if self.mode == "l2" and (self.scale is None or self.scale <= 0):
            raise ConfigError("l2 normalization needs a positive scale")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class BatchNormState:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return x, False


# -- convolution ----------------------------------------------------------------


def _conv_windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int):
    for u in range(k):
        for v in range(k):
            r0, c0 = u * dilation, v * dilation
            yield u, v, (slice(None), slice(None),
                         slice(r0, r0 + stride * (ho - 1) + 1, stride),
                         slice(c0, c0 + stride * (wo - 1) + 1, stride))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, cfg: ConvConfig) -> np.ndarray:
    n, c, h, wd = x.shape
    if w.shape != (cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel):
        raise ShapeError(f"weight shape {w.shape} does not match {cfg}")
    if c != cfg.in_channels:
        raise ShapeError(f"input has {c} channels, conv expects {cfg.in_channels}")
    ho, wo = cfg.out_size(h), cfg.out_size(wd)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{wd} too small for {cfg}")
    p = cfg.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    acc = np.zeros((cfg.out_channels, n, ho, wo), dtype=x.dtype)
    for u, v, sl in _conv_windows(xp, cfg.kernel, cfg.stride, cfg.dilation, ho, wo):
        acc += np.tensordot(w[:, :, u, v], xp[sl], axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, cfg: ConvConfig, need_dx=True):
    n, c, h, wd = x.shape
    ho, wo = g.shape[2:]
    p = cfg.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for u, v, sl in _conv_windows(xp, cfg.kernel, cfg.stride, cfg.dilation, ho, wo):
        dw[:, :, u, v] = np.tensordot(g, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
        if need_dx:
            dxp[sl] += np.tensordot(w[:, :, u, v], g, axes=([0], [1])).transpose(1, 0, 2, 3)
    db = g.sum(axis=(0, 2, 3))
    dx = None
    if need_dx:
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dw, db


def conv2d(x: np.ndarray, cfg: ConvConfig, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Direct 2D convolution with stride and dilation.

    ``y[o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x[c, i*s + u*d - pad, j*s + v*d - pad]``
    with out-of-range input read as zero.
    """
    xb, single = _as_batch(x)
    if bias is None:
        bias = np.zeros(cfg.out_channels, dtype=x.dtype)
    y = conv2d_forward(xb, weights, bias, cfg)
    return y[0] if single else y


def conv2d_op(x: Node, w: Node, b: Node, cfg: ConvConfig) -> Node:
    xv, wv = x.value, w.value
    y = conv2d_forward(xv, wv, b.value, cfg)

    def bw(g):
        dx, dw, db = conv2d_backward(g, xv, wv, cfg, need_dx=x.requires_grad)
        return dx, dw, db

    return x.tape.record("conv2d", (x, w, b), y, bw)


# -- pooling --------------------------------------------------------------------


def pool_padding(n: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size ``ceil(n / stride)`` and the (before, after) zero padding."""
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return out, total // 2, total - total // 2


def _pool_taps(x: np.ndarray, k: int, stride: int):
    n, c, h, w = x.shape
    ho, pt, pb = pool_padding(h, k, stride)
    wo, pl, pr = pool_padding(w, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    taps = []
    for u in range(k):
        for v in range(k):
            taps.append((slice(None), slice(None),
                         slice(u, u + stride * (ho - 1) + 1, stride),
                         slice(v, v + stride * (wo - 1) + 1, stride)))
    return xp, taps, (pt, pl)


def maxpool_forward(x: np.ndarray, k: int, stride: int):
    if k < 1 or stride < 1:
        raise ConfigError(f"invalid pool config k={k} stride={stride}")
    xp, taps, _ = _pool_taps(x, k, stride)
    stack = np.stack([xp[sl] for sl in taps])
    arg = stack.argmax(axis=0)  # first maximal tap wins ties
    out = np.take_along_axis(stack, arg[None], axis=0)[0]
    return np.ascontiguousarray(out), arg


def maxpool_backward(g: np.ndarray, x: np.ndarray, arg: np.ndarray, k: int, stride: int) -> np.ndarray:
    xp, taps, (pt, pl) = _pool_taps(x, k, stride)
    dxp = np.zeros(xp.shape, dtype=g.dtype)
    for t, sl in enumerate(taps):
        dxp[sl] += np.where(arg == t, g, 0)
    h, w = x.shape[2:]
    return np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + w])


def maxpool(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    xb, single = _as_batch(x)
    y, _ = maxpool_forward(xb, k, stride)
    return y[0] if single else y


def maxpool_op(x: Node, k: int, stride: int) -> Node:
    xv = x.value
    y, arg = maxpool_forward(xv, k, stride)
    return x.tape.record("maxpool", (x,), y, lambda g: (maxpool_backward(g, xv, arg, k, stride),))


# -- bilinear upsampling ----------------------------------------------------------


def bilinear_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Interpolation weights ``[n_in * factor, n_in]``.

    Output sample ``i`` reads input coordinate ``(i + 0.5) / factor - 0.5``,
    clamped to ``[0, n_in - 1]``.
    """
    if factor < 1:
        raise ConfigError(f"upsampling factor must be >= 1, got {factor}")
    n_out = n_in * factor
    src = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    xb, single = _as_batch(x)
    ah = bilinear_matrix(xb.shape[2], factor, xb.dtype)
    aw = bilinear_matrix(xb.shape[3], factor, xb.dtype)
    y = ah @ xb @ aw.T
    return y[0] if single else y


def upsample_op(x: Node, factor: int) -> Node:
    if factor == 1:
        return x
    xv = x.value
    ah = bilinear_matrix(xv.shape[2], factor, xv.dtype)
    aw = bilinear_matrix(xv.shape[3], factor, xv.dtype)
    return x.tape.record("upsample", (x,), ah @ xv @ aw.T, lambda g: (ah.T @ g @ aw,))


# -- softmax and loss -----------------------------------------------------------------


def softmax_pixelwise(logits: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Per-pixel softmax over the label axis (0 for ``[L,H,W]``, 1 for batches)."""
    if axis is None:
        axis = 0 if logits.ndim == 3 else 1
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_op(x: Node) -> Node:
    p = softmax_pixelwise(x.value, axis=1)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return x.tape.record("softmax", (x,), p, bw)


def _label_mask(labels: np.ndarray, n_labels: int, ignore: int) -> np.ndarray:
    valid = labels != ignore
    bad = valid & ((labels < 0) | (labels >= n_labels))
    if bad.any():
        raise ValueError(f"label out of range 0..{n_labels - 1}: {np.unique(labels[bad])}")
    if not valid.any():
        raise ValueError("every pixel carries the ignore label")
    return valid


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray, ignore: int = IGNORE_LABEL) -> float:
    """Mean of ``-ln p[label]`` over pixels whose label is not ``ignore``."""
    if probs.ndim == 3:
        probs, labels = probs[None], labels[None]
    valid = _label_mask(labels, probs.shape[1], ignore)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    return float(-np.log(picked[valid]).sum() / valid.sum())


def cross_entropy_op(p: Node, labels: np.ndarray, ignore: int = IGNORE_LABEL) -> Node:
    pv = p.value
    valid = _label_mask(labels, pv.shape[1], ignore)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(pv, safe[:, None], axis=1)[:, 0]
    count = valid.sum()
    loss = -np.log(np.where(valid, picked, 1)).sum() / count

    def bw(g):
        d = np.zeros_like(pv)
        scat = np.where(valid, -1.0 / (picked * count), 0).astype(pv.dtype)
        np.put_along_axis(d, safe[:, None], scat[:, None], axis=1)
        return (d * g.reshape(-1)[0],)

    return p.tape.record("cross_entropy", (p,), np.asarray([loss], dtype=pv.dtype), bw)


def softmax_cross_entropy_op(logits: Node, labels: np.ndarray, ignore: int = IGNORE_LABEL) -> Node:
    """Fused, numerically stable softmax followed by masked cross entropy."""
    z = logits.value
    valid = _label_mask(labels, z.shape[1], ignore)
    safe = np.where(valid, labels, 0)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    count = valid.sum()
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -picked[valid].sum() / count

    def bw(g):
        d = np.exp(logp)
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        d = (d - onehot) * valid[:, None] / count
        return (d * g.reshape(-1)[0],)

    return logits.tape.record("softmax_xent", (logits,), np.asarray([loss], dtype=z.dtype), bw)


# -- normalization -------------------------------------------------------------------


def batch_norm_forward(x, gamma, beta, state: BatchNormState, cfg: NormConfig, training: bool):
    n, c, h, w = x.shape
    if training:
        m = n * h * w
        if m < 2:
            raise ShapeError("batch norm needs at least two samples per channel in training")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state.mean[...] = cfg.momentum * state.mean + (1 - cfg.momentum) * mu
        state.var[...] = cfg.momentum * state.var + (1 - cfg.momentum) * var * m / (m - 1)
    else:
        mu, var = state.mean, state.var
    inv = 1.0 / np.sqrt(var + cfg.eps)
    xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y.astype(x.dtype), xhat, inv


def batch_norm(x, cfg: NormConfig, gamma, beta, state: BatchNormState, training: bool = True):
    y, _, _ = batch_norm_forward(x, gamma, beta, state, cfg, training)
    return y


def batch_norm_op(x: Node, gamma: Node, beta: Node, state: BatchNormState, cfg: NormConfig, training: bool) -> Node:
    y, xhat, inv = batch_norm_forward(x.value, gamma.value, beta.value, state, cfg, training)
    gv = gamma.value
    n, c, h, w = x.value.shape
    m = n * h * w

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gv[None, :, None, None]
        if training:
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx.astype(g.dtype), dgamma, dbeta

    return x.tape.record("batch_norm", (x, gamma, beta), y, bw)


_NORM_GUARD = 1e-12


def l2_normalize_scale(x: np.ndarray, scale: float = 1000.0) -> np.ndarray:
    """Scale each ``C x H x W`` map to L2 norm ``scale``; near-zero maps become zero."""
    xb, single = _as_batch(x)
    norms = np.sqrt((xb * xb).sum(axis=(1, 2, 3)))
    small = norms <= _NORM_GUARD
    if small.any():
        log.warning("l2 normalization: %d near-zero map(s) mapped to zero", int(small.sum()))
    factor = np.where(small, 0.0, scale / np.where(small, 1.0, norms))
    y = xb * factor[:, None, None, None]
    return y[0] if single else y


def l2_normalize_op(x: Node, scale: float) -> Node:
    xv = x.value
    norms = np.sqrt((xv * xv).sum(axis=(1, 2, 3)))
    small = norms <= _NORM_GUARD
    if small.any():
        log.warning("l2 normalization: %d near-zero map(s) mapped to zero", int(small.sum()))
    safe = np.where(small, 1.0, norms)[:, None, None, None]
    unit = np.where(small[:, None, None, None], 0.0, xv / safe)
    y = (scale * unit).astype(xv.dtype)

    def bw(g):
        dot = (unit * g).sum(axis=(1, 2, 3), keepdims=True)
        dx = scale / safe * (g - unit * dot)
        return (np.where(small[:, None, None, None], 0.0, dx).astype(g.dtype),)

    return x.tape.record("l2_normalize", (x,), y, bw)


def effective_extent(kernel: int, dilation: int) -> int:
    return (kernel - 1) * dilation + 1


def grid_extent(n: int, s: int) -> int:
    return math.ceil(n / s)
