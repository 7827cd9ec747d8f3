"""Fully connected CRF refinement by dense mean-field iteration.

Unary potentials are ``-ln p`` from the network; the pairwise kernel is

    k(i, j) = w1 * exp(-|p_i - p_j|^2 / 2 theta_a^2 - |I_i - I_j|^2 / 2 theta_b^2)
            + w2 * exp(-|p_i - p_j|^2 / 2 theta_g^2)

over pixel positions ``p`` and colours ``I`` with Potts label compatibility.
Messages are evaluated exactly over all pixel pairs, in row blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_PIXELS = 16384
_BLOCK = 1024


@dataclass(frozen=True)
class CrfParams:
    appearance_weight: float = 4.0
    smoothness_weight: float = 3.0
    theta_alpha: float = 10.0
    theta_beta: float = 13.0
    theta_gamma: float = 3.0
    iterations: int = 2

    def __post_init__(self):
        if self.appearance_weight < 0 or self.smoothness_weight < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("bandwidths must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def _features(image: np.ndarray):
    _, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w]
    pos = np.stack([ys.ravel(), xs.ravel()], axis=1).astype(np.float64)
    col = image.reshape(image.shape[0], -1).T.astype(np.float64)
    return pos, col


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def _messages(Q: np.ndarray, pos, col, params: CrfParams) -> np.ndarray:
    """``sum_{j != i} k(i, j) Q_j`` for every pixel ``i``; ``Q`` is ``[N, L]``."""
    n = Q.shape[0]
    out = np.empty_like(Q)
    for s in range(0, n, _BLOCK):
        e = min(s + _BLOCK, n)
        dpos = _sqdist(pos[s:e], pos)
        k = np.zeros((e - s, n))
        if params.appearance_weight:
            dcol = _sqdist(col[s:e], col)
            k += params.appearance_weight * np.exp(
                -dpos / (2 * params.theta_alpha ** 2) - dcol / (2 * params.theta_beta ** 2))
        if params.smoothness_weight:
            k += params.smoothness_weight * np.exp(-dpos / (2 * params.theta_gamma ** 2))
        k[np.arange(e - s), np.arange(s, e)] = 0.0
        out[s:e] = k @ Q
    return out


def mean_field(probs: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
               history: list | None = None) -> np.ndarray:
    """Refine ``probs [L, H, W]`` given ``image [3, H, W]``.

    Each synchronous update sets ``Q_i(l) ∝ p_i(l) * exp(sum_j k(i, j) Q_j(l))``,
    which is the Potts mean-field step up to a per-pixel constant.  When
    ``history`` is a list, the distribution after every iteration is appended.
    """
    L, h, w = probs.shape
    n = h * w
    if image.shape[1:] != (h, w):
        raise ValueError(f"image {image.shape} does not match probabilities {probs.shape}")
    if n > MAX_PIXELS:
        raise ValueError(f"{n} pixels exceed the dense CRF limit of {MAX_PIXELS}")
    sums = probs.sum(axis=0)
    if np.any(probs < 0) or not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("input probabilities are not normalized per pixel")
    unary = -np.log(np.clip(probs.reshape(L, n).T.astype(np.float64), 1e-300, None))
    Q = probs.reshape(L, n).T.astype(np.float64)
    pos, col = _features(image)
    for _ in range(params.iterations):
        logits = -unary + _messages(Q, pos, col, params)
        logits -= logits.max(axis=1, keepdims=True)
        Q = np.exp(logits)
        Q /= Q.sum(axis=1, keepdims=True)
        if history is not None:
            history.append(Q.T.reshape(L, h, w).copy())
    return Q.T.reshape(L, h, w)


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel most probable label; ties go to the lowest index."""
    return probs.argmax(axis=0).astype(np.int64)
