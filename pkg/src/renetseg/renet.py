"""Spatially recurrent layers.

A ReNet layer cuts a feature map into a grid of patches and runs two 1D
recurrent nets with independent weights along one grid axis, one in each
direction, concatenating their hidden states.  Two such layers with
orthogonal sweep axes form a recurrent layer group whose outputs see the
whole input.

Lanes (grid columns for a vertical sweep, rows for a horizontal one) are
independent.  They are processed in fixed-size blocks, and the two
directions are separate tasks; blocks and directions may run on a thread
pool.  Block boundaries never depend on the worker count and partial weight
gradients are reduced in block order, so results are bit-identical for any
number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Node
from .tensor import ShapeError

GATES = ("i", "f", "c", "o")
LANE_BLOCK = 64


def sigmoid(z):
    with np.errstate(over="ignore"):  # exp overflow saturates to the right limit
        return 1.0 / (1.0 + np.exp(-z))


@dataclass
class LstmParams:
    """Per-gate weights ``W[g]: [d, p]``, ``U[g]: [d, d]``, ``b[g]: [d]``.

    Gate keys: ``i`` input, ``f`` forget, ``c`` cell input, ``o`` output.
    """

    W: dict[str, np.ndarray]
    U: dict[str, np.ndarray]
    b: dict[str, np.ndarray]

    def __post_init__(self):
        d, p = self.W["i"].shape
        for g in GATES:
            if self.W[g].shape != (d, p) or self.U[g].shape != (d, d) or self.b[g].shape != (d,):
                raise ShapeError(f"inconsistent LSTM gate shapes for gate {g!r}")

    @property
    def hidden(self) -> int:
        return self.W["i"].shape[0]

    @property
    def input_width(self) -> int:
        return self.W["i"].shape[1]

    def stacked(self):
        return (np.concatenate([self.W[g] for g in GATES]),
                np.concatenate([self.U[g] for g in GATES]),
                np.concatenate([self.b[g] for g in GATES]))

    def copy(self) -> "LstmParams":
        return LstmParams({g: self.W[g].copy() for g in GATES},
                          {g: self.U[g].copy() for g in GATES},
                          {g: self.b[g].copy() for g in GATES})

    @classmethod
    def zeros(cls, p: int, d: int, dtype=np.float64) -> "LstmParams":
        return cls({g: np.zeros((d, p), dtype) for g in GATES},
                   {g: np.zeros((d, d), dtype) for g in GATES},
                   {g: np.zeros(d, dtype) for g in GATES})

    @classmethod
    def uniform(cls, p: int, d: int, rng: np.random.Generator, limit: float = 0.2, dtype=np.float64):
        return cls({g: rng.uniform(-limit, limit, (d, p)).astype(dtype) for g in GATES},
                   {g: rng.uniform(-limit, limit, (d, d)).astype(dtype) for g in GATES},
                   {g: rng.uniform(-limit, limit, d).astype(dtype) for g in GATES})


@dataclass
class IrnnParams:
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        d, p = self.W.shape
        if self.U.shape != (d, d) or self.b.shape != (d,):
            raise ShapeError("inconsistent IRNN shapes")

    @property
    def hidden(self) -> int:
        return self.W.shape[0]

    def stacked(self):
        return self.W, self.U, self.b

    @classmethod
    def identity(cls, p: int, d: int, rng: np.random.Generator | None = None, limit: float = 0.2, dtype=np.float64):
        """Identity recurrence, zero bias; input weights uniform in ``[-limit, limit]`` (or zero)."""
        w = rng.uniform(-limit, limit, (d, p)).astype(dtype) if rng is not None else np.zeros((d, p), dtype)
        return cls(w, np.eye(d, dtype=dtype), np.zeros(d, dtype))


@dataclass
class LstmState:
    h: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, d: int, dtype=np.float64) -> "LstmState":
        return cls(np.zeros(d, dtype), np.zeros(d, dtype))


@dataclass
class ReNetLayerConfig:
    direction: str  # "vertical" | "horizontal"
    forward: LstmParams | IrnnParams
    backward: LstmParams | IrnnParams
    patch: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.direction not in ("vertical", "horizontal"):
            raise ValueError(f"unknown sweep direction {self.direction!r}")
        s, t = self.patch
        if s < 1 or t < 1:
            raise ValueError(f"patch size must be >= 1, got {self.patch}")
        if self.forward is self.backward:
            raise ValueError("forward and backward sweeps need independent parameters")
        if type(self.forward) is not type(self.backward):
            raise ValueError("both directions must use the same cell type")

    @property
    def hidden(self) -> int:
        return self.forward.hidden

    @property
    def cell(self) -> str:
        return "lstm" if isinstance(self.forward, LstmParams) else "irnn"


@dataclass
class ReNetGroupConfig:
    vertical: ReNetLayerConfig
    horizontal: ReNetLayerConfig

    def __post_init__(self):
        if self.vertical.direction != "vertical" or self.horizontal.direction != "horizontal":
            raise ValueError("a group sweeps vertically first, then horizontally")
        if self.horizontal.patch != (1, 1):
            raise ValueError("the second layer of a group scans 1x1 patches")

    def grid_dims(self, height: int, width: int) -> tuple[int, int]:
        s, t = self.vertical.patch
        return math.ceil(height / s), math.ceil(width / t)


# -- single step -----------------------------------------------------------------


def lstm_step(x: np.ndarray, prev: LstmState, params: LstmParams) -> LstmState:
    d, p = params.hidden, params.input_width
    if x.shape != (p,) or prev.h.shape != (d,) or prev.C.shape != (d,):
        raise ShapeError(f"lstm_step dims: x {x.shape}, h {prev.h.shape}, C {prev.C.shape} vs p={p}, d={d}")

    def pre(g):
        return params.W[g] @ x + params.U[g] @ prev.h + params.b[g]

    i, f, o = sigmoid(pre("i")), sigmoid(pre("f")), sigmoid(pre("o"))
    c_in = np.tanh(pre("c"))
    c = f * prev.C + i * c_in
    return LstmState(o * np.tanh(c), c)


# -- patch grid ---------------------------------------------------------------------


def patch_grid(fmap: np.ndarray, s: int, t: int) -> np.ndarray:
    """``[C, H, W] -> [h, w, C*s*t]`` (or batched ``[N, C, H, W] -> [N, h, w, C*s*t]``).

    Patches flatten channel-major, then row, then column.  Border patches
    that stick out of the map are zero-filled.
    """
    single = fmap.ndim == 3
    x = fmap[None] if single else fmap
    g = _patch_grid(x, s, t)
    return g[0] if single else g


def _patch_grid(x: np.ndarray, s: int, t: int) -> np.ndarray:
    if s < 1 or t < 1:
        raise ValueError(f"patch size must be >= 1, got {(s, t)}")
    n, c, hh, ww = x.shape
    h, w = math.ceil(hh / s), math.ceil(ww / t)
    if (h * s, w * t) != (hh, ww):
        x = np.pad(x, ((0, 0), (0, 0), (0, h * s - hh), (0, w * t - ww)))
    g = x.reshape(n, c, h, s, w, t).transpose(0, 2, 4, 1, 3, 5).reshape(n, h, w, c * s * t)
    return np.ascontiguousarray(g)


def _patch_grid_backward(g: np.ndarray, shape, s: int, t: int) -> np.ndarray:
    n, c, hh, ww = shape
    h, w = g.shape[1:3]
    x = g.reshape(n, h, w, c, s, t).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, h * s, w * t)
    return np.ascontiguousarray(x[:, :, :hh, :ww])


def patch_grid_op(x: Node, s: int, t: int) -> Node:
    shape = x.value.shape
    return x.tape.record("patch_grid", (x,), _patch_grid(x.value, s, t),
                         lambda g: (_patch_grid_backward(g, shape, s, t),))


# -- recurrent kernels ------------------------------------------------------------------
#
# A run processes X: [T, B, p] along T for B independent lanes.  Weight
# matrices are gate-stacked: W [G*d, p], U [G*d, d], b [G*d].


def _lstm_run(X, W, U, b, reverse, h0=None, c0=None):
    T, B, _ = X.shape
    d = U.shape[1]
    zx = X @ W.T + b
    h = np.zeros((B, d), X.dtype) if h0 is None else np.broadcast_to(h0, (B, d)).astype(X.dtype)
    c = np.zeros((B, d), X.dtype) if c0 is None else np.broadcast_to(c0, (B, d)).astype(X.dtype)
    H = np.empty((T, B, d), X.dtype)
    cache = np.empty((T, 6, B, d), X.dtype)  # i, f, g, o, tanh(C), C_prev
    hprev = np.empty((T, B, d), X.dtype)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        hprev[t] = h
        z = zx[t] + h @ U.T
        i = sigmoid(z[:, :d])
        f = sigmoid(z[:, d:2 * d])
        g = np.tanh(z[:, 2 * d:3 * d])
        o = sigmoid(z[:, 3 * d:])
        cache[t, 5] = c
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        cache[t, :5] = (i, f, g, o, tc)
        H[t] = h
    return H, (X, W, U, hprev, cache, reverse)


def _lstm_back(dH, saved):
    X, W, U, hprev, cache, reverse = saved
    T, B, _ = X.shape
    d = U.shape[1]
    dZ = np.empty((T, B, 4 * d), X.dtype)
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, d), X.dtype)
    dc_next = np.zeros((B, d), X.dtype)
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        i, f, g, o, tc, cprev = cache[t]
        dh = dH[t] + dh_next
        dc = dh * o * (1 - tc * tc) + dc_next
        dz = dZ[t]
        dz[:, :d] = dc * g * i * (1 - i)
        dz[:, d:2 * d] = dc * cprev * f * (1 - f)
        dz[:, 2 * d:3 * d] = dc * i * (1 - g * g)
        dz[:, 3 * d:] = dh * tc * o * (1 - o)
        dc_next = dc * f
        dU += dz.T @ hprev[t]
        dh_next = dz @ U
    flat = dZ.reshape(T * B, 4 * d)
    dW = flat.T @ X.reshape(T * B, -1)
    db = flat.sum(axis=0)
    dX = dZ @ W
    return dX, dW, dU, db


def _irnn_run(X, W, U, b, reverse, h0=None, c0=None):
    T, B, _ = X.shape
    d = U.shape[1]
    zx = X @ W.T + b
    h = np.zeros((B, d), X.dtype) if h0 is None else np.broadcast_to(h0, (B, d)).astype(X.dtype)
    H = np.empty((T, B, d), X.dtype)
    hprev = np.empty((T, B, d), X.dtype)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        hprev[t] = h
        h = np.maximum(zx[t] + h @ U.T, 0)
        H[t] = h
    return H, (X, W, U, hprev, H, reverse)


def _irnn_back(dH, saved):
    X, W, U, hprev, H, reverse = saved
    T, B, _ = X.shape
    d = U.shape[1]
    dZ = np.empty((T, B, d), X.dtype)
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, d), X.dtype)
    steps = range(T) if reverse else range(T - 1, -1, -1)
    for t in steps:
        dz = (dH[t] + dh_next) * (H[t] > 0)
        dZ[t] = dz
        dU += dz.T @ hprev[t]
        dh_next = dz @ U
    flat = dZ.reshape(T * B, d)
    return dZ @ W, flat.T @ X.reshape(T * B, -1), dU, flat.sum(axis=0)


_KERNELS = {"lstm": (_lstm_run, _lstm_back), "irnn": (_irnn_run, _irnn_back)}


@lru_cache(maxsize=None)
def _pool(workers: int) -> ThreadPoolExecutor:
    return ThreadPoolExecutor(max_workers=workers, thread_name_prefix="renet")


def _run_tasks(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*a) for a in tasks]
    return list(_pool(workers).map(lambda a: fn(*a), tasks))


def _blocks(n_lanes: int, block: int):
    return [slice(s, min(s + block, n_lanes)) for s in range(0, n_lanes, block)]


class _Sweep:
    """Both directions of one sweep over ``X: [T, B, p]``; block/direction parallel."""

    def __init__(self, cell, params_f, params_b, workers=1, block=LANE_BLOCK):
        self.run, self.back = _KERNELS[cell]
        self.params = (params_f, params_b)
        self.workers = workers
        self.block = block

    def forward(self, X, h0=None):
        T, B, _ = X.shape
        self.blocks = _blocks(B, self.block)
        tasks = [(k, sl) for k in (0, 1) for sl in self.blocks]
        self.tasks = tasks

        def job(k, sl):
            W, U, b = self.params[k]
            return self.run(np.ascontiguousarray(X[:, sl]), W, U, b, reverse=(k == 1), h0=h0)

        results = _run_tasks(job, tasks, self.workers)
        self.saved = [r[1] for r in results]
        d = self.params[0][1].shape[1]
        out = np.empty((T, B, 2 * d), X.dtype)
        for (k, sl), (H, _) in zip(tasks, results):
            out[:, sl, k * d:(k + 1) * d] = H
        return out

    def backward(self, dOut):
        T, B, _ = dOut.shape
        d = self.params[0][1].shape[1]
        tasks = [(k, sl, saved) for (k, sl), saved in zip(self.tasks, self.saved)]

        def job(k, sl, saved):
            dH = np.ascontiguousarray(dOut[:, sl, k * d:(k + 1) * d])
            return self.back(dH, saved)

        results = _run_tasks(job, tasks, self.workers)
        p = self.params[0][0].shape[1]
        dX = np.zeros((T, B, p), dOut.dtype)
        grads = []
        for k in (0, 1):
            W, U, b = self.params[k]
            dW, dU, db = np.zeros_like(W), np.zeros_like(U), np.zeros_like(b)
            for (kk, sl, _), (dx, dw, du, dbb) in zip(tasks, results):
                if kk != k:
                    continue
                dX[:, sl] += dx
                dW += dw
                dU += du
                db += dbb
            grads.append((dW, dU, db))
        return dX, grads


def _to_sequences(grid: np.ndarray, direction: str) -> np.ndarray:
    """``[N, h, w, p] -> [T, lanes, p]`` with T along the sweep axis."""
    n, h, w, p = grid.shape
    if direction == "vertical":
        return np.ascontiguousarray(grid.transpose(1, 0, 2, 3)).reshape(h, n * w, p)
    return np.ascontiguousarray(grid.transpose(2, 0, 1, 3)).reshape(w, n * h, p)


def _from_sequences(seq: np.ndarray, shape, direction: str) -> np.ndarray:
    n, h, w = shape
    c = seq.shape[-1]
    if direction == "vertical":
        return np.ascontiguousarray(seq.reshape(h, n, w, c).transpose(1, 0, 2, 3))
    return np.ascontiguousarray(seq.reshape(w, n, h, c).transpose(1, 2, 0, 3))


def renet_sweep(grid: np.ndarray, cfg: ReNetLayerConfig, workers: int = 1, block: int = LANE_BLOCK,
                h0: np.ndarray | None = None) -> np.ndarray:
    """Bidirectional sweep over a patch grid ``[h, w, p]`` (or ``[N, h, w, p]``).

    Returns ``[h, w, 2d]``: forward-direction hidden state in the first ``d``
    channels, backward-direction in the last ``d``.  Both directions start
    from zero state unless ``h0`` injects an initial hidden state.
    """
    single = grid.ndim == 3
    g = grid[None] if single else grid
    if g.shape[-1] != cfg.forward.stacked()[0].shape[1]:
        raise ShapeError(f"grid width {g.shape[-1]} does not match input width of {cfg.direction} layer")
    sweep = _Sweep(cfg.cell, cfg.forward.stacked(), cfg.backward.stacked(), workers, block)
    out = sweep.forward(_to_sequences(g, cfg.direction), h0=h0)
    out = _from_sequences(out, g.shape[:3], cfg.direction)
    return out[0] if single else out


def irnn_sweep(grid: np.ndarray, cfg: ReNetLayerConfig, workers: int = 1, h0: np.ndarray | None = None):
    if cfg.cell != "irnn":
        raise ValueError("irnn_sweep needs IrnnParams")
    return renet_sweep(grid, cfg, workers=workers, h0=h0)


def renet_group(fmap: np.ndarray, cfg: ReNetGroupConfig, workers: int = 1, block: int = LANE_BLOCK) -> np.ndarray:
    """``[C, H, W] -> [2d, ceil(H/s), ceil(W/t)]`` (batched input also accepted)."""
    single = fmap.ndim == 3
    x = fmap[None] if single else fmap
    s, t = cfg.vertical.patch
    g = _patch_grid(x, s, t)
    g = renet_sweep(g, cfg.vertical, workers, block)
    g = renet_sweep(g, cfg.horizontal, workers, block)
    out = np.ascontiguousarray(g.transpose(0, 3, 1, 2))
    return out[0] if single else out


# -- tape ops ------------------------------------------------------------------------------


def sweep_op(grid: Node, direction: str, cell: str, fwd: tuple[Node, Node, Node], bwd: tuple[Node, Node, Node],
             workers: int = 1, block: int = LANE_BLOCK) -> Node:
    """Differentiable bidirectional sweep; ``fwd``/``bwd`` are gate-stacked (W, U, b) nodes."""
    gv = grid.value
    n, h, w, p = gv.shape
    if fwd[0].value.shape[1] != p:
        raise ShapeError(f"grid width {p} does not match sweep input width {fwd[0].value.shape[1]}")
    sweep = _Sweep(cell, tuple(x.value for x in fwd), tuple(x.value for x in bwd), workers, block)
    out = _from_sequences(sweep.forward(_to_sequences(gv, direction)), (n, h, w), direction)

    def bw(g):
        dseq, grads = sweep.backward(_to_sequences(g, direction))
        dgrid = _from_sequences(dseq, (n, h, w), direction)
        (dWf, dUf, dbf), (dWb, dUb, dbb) = grads
        return dgrid, dWf, dUf, dbf, dWb, dUb, dbb

    return grid.tape.record(f"renet_{direction}", (grid, *fwd, *bwd), out, bw)


def layer_param_names(prefix: str, axis: str, cell: str = "lstm") -> dict[str, list[str]]:
    """Checkpoint names ``<prefix>.<V|H>.<F|B>.<gate>.<W|U|b>`` per direction."""
    gates = GATES if cell == "lstm" else ("rnn",)
    return {
        side: [f"{prefix}.{axis}.{side}.{g}.{m}" for m in ("W", "U", "b") for g in gates]
        for side in ("F", "B")
    }


def _stacked_nodes(params: Mapping[str, Node], prefix: str, axis: str, side: str, cell: str):
    if cell == "irnn":
        return tuple(params[f"{prefix}.{axis}.{side}.rnn.{m}"] for m in ("W", "U", "b"))
    return tuple(
        ag.concat([params[f"{prefix}.{axis}.{side}.{g}.{m}"] for g in GATES], axis=0)
        for m in ("W", "U", "b")
    )


def group_op(x: Node, params: Mapping[str, Node], prefix: str, patch: tuple[int, int], cell: str = "lstm",
             workers: int = 1, block: int = LANE_BLOCK) -> Node:
    """Recurrent layer group on ``[N, C, H, W]``: vertical sweep over ``patch``, then horizontal over 1x1."""
    g = patch_grid_op(x, *patch)
    for axis, direction in (("V", "vertical"), ("H", "horizontal")):
        fwd = _stacked_nodes(params, prefix, axis, "F", cell)
        bwd = _stacked_nodes(params, prefix, axis, "B", cell)
        g = sweep_op(g, direction, cell, fwd, bwd, workers, block)
    return ag.permute(g, (0, 3, 1, 2))


def layer_params_to_dict(prefix: str, axis: str, cfg: ReNetLayerConfig) -> dict[str, np.ndarray]:
    out = {}
    for side, prm in (("F", cfg.forward), ("B", cfg.backward)):
        if isinstance(prm, LstmParams):
            for g in GATES:
                out[f"{prefix}.{axis}.{side}.{g}.W"] = prm.W[g]
                out[f"{prefix}.{axis}.{side}.{g}.U"] = prm.U[g]
                out[f"{prefix}.{axis}.{side}.{g}.b"] = prm.b[g]
        else:
            out[f"{prefix}.{axis}.{side}.rnn.W"] = prm.W
            out[f"{prefix}.{axis}.{side}.rnn.U"] = prm.U
            out[f"{prefix}.{axis}.{side}.rnn.b"] = prm.b
    return out


def group_params_to_dict(prefix: str, cfg: ReNetGroupConfig) -> dict[str, np.ndarray]:
    return {**layer_params_to_dict(prefix, "V", cfg.vertical), **layer_params_to_dict(prefix, "H", cfg.horizontal)}


def lstm_param_count(p: int, d: int) -> int:
    return 4 * d * (p + d + 1)


def irnn_param_count(p: int, d: int) -> int:
    return d * (p + d + 1)
