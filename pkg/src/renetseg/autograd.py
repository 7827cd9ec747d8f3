"""Tape-based reverse-mode differentiation and a central-difference checker.

Every differentiable op records a :class:`Node` on the tape of its inputs.
A node carries its forward value and a closure mapping the gradient of its
output to gradients of its inputs.  :meth:`Tape.backward` walks the tape in
reverse recording order, which is a topological order by construction.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import ShapeError, concat_channels, inverse_permutation

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class StateError(RuntimeError):
    pass


class PrecisionError(RuntimeError):
    pass


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "grad", "requires_grad", "name", "_backward")

    def __init__(self, tape, op, inputs, value, requires_grad, backward=None, name=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} {self.value.shape}>"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Tape:
    """Ordered record of one forward evaluation.

    ``params`` maps parameter names to their nodes; frozen parameters are
    recorded as constants so they never receive gradient entries.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.frozen: set[str] = set()
        self.loss: Node | None = None
        self.outputs: dict[str, Node] = {}
        # set by Graph.forward so grad_check can replay the evaluation
        self.graph: Graph | None = None
        self.bound_inputs: dict[str, np.ndarray] | None = None
        self.param_values: dict[str, np.ndarray] | None = None
        self.frozen_names: frozenset[str] = frozenset()

    def constant(self, value, name=None) -> Node:
        node = Node(self, "const", (), np.asarray(value, dtype=self.dtype), False, name=name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray, frozen: bool = False) -> Node:
        if name in self.params or name in self.frozen:
            raise ValueError(f"parameter {name!r} bound twice")
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        node = Node(self, "param", (), value, not frozen, name=name)
        self.nodes.append(node)
        if frozen:
            self.frozen.add(name)
        else:
            self.params[name] = node
        return node

    def record(self, op: str, inputs: Sequence[Node], value: np.ndarray, backward: BackwardFn) -> Node:
        for x in inputs:
            if x.tape is not self:
                raise ValueError(f"{op}: input {x!r} belongs to another tape")
        req = any(x.requires_grad for x in inputs)
        node = Node(self, op, inputs, value, req, backward if req else None)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node | None = None) -> dict[str, np.ndarray]:
        loss = loss if loss is not None else self.loss
        if loss is None:
            raise StateError("backward called before a forward pass produced a loss")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for x, g in zip(node.inputs, grads):
                if g is None or not x.requires_grad:
                    continue
                if g.shape != x.value.shape:
                    raise ShapeError(f"{node.op}: gradient shape {g.shape} != input shape {x.value.shape}")
                x.grad = g if x.grad is None else x.grad + g
        return {
            name: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for name, n in self.params.items()
        }

    def release(self) -> None:
        """Drop every recorded node so activations are freed without waiting for the cycle collector."""
        for n in self.nodes:
            n.inputs, n.grad, n._backward = (), None, None
        self.nodes.clear()
        self.params.clear()
        self.outputs.clear()
        self.loss = None


class Graph:
    """A differentiable program with named inputs.

    ``fn(tape, inputs, params)`` receives input and parameter nodes and
    returns either a scalar loss node or a dict of named output nodes
    (a ``"loss"`` entry marks the loss).
    """

    def __init__(self, fn, input_names: Sequence[str]):
        self.fn = fn
        self.input_names = tuple(input_names)

    def forward(
        self,
        inputs: Mapping[str, np.ndarray],
        params: Mapping[str, np.ndarray],
        frozen: Sequence[str] = (),
        dtype=None,
    ) -> Tape:
        missing = [n for n in self.input_names if n not in inputs]
        if missing:
            raise KeyError(f"unbound graph inputs: {missing}")
        if dtype is None:
            dtype = next(iter(params.values())).dtype if params else np.float64
        tape = Tape(dtype)
        frozen = frozenset(frozen)
        pnodes = {k: tape.param(k, v, frozen=k in frozen) for k, v in params.items()}
        # integer inputs (label maps) are passed through as raw arrays
        inodes = {
            k: tape.constant(inputs[k], name=k) if np.issubdtype(np.asarray(inputs[k]).dtype, np.floating)
            else np.asarray(inputs[k])
            for k in self.input_names
        }
        out = self.fn(tape, inodes, pnodes)
        if isinstance(out, Node):
            tape.loss = out
            tape.outputs = {"loss": out}
        else:
            tape.outputs = dict(out)
            tape.loss = tape.outputs.get("loss")
        tape.graph = self
        tape.bound_inputs = dict(inputs)
        tape.param_values = dict(params)
        tape.frozen_names = frozen
        return tape


def forward(graph: Graph, inputs, params, frozen=(), dtype=None) -> Tape:
    return graph.forward(inputs, params, frozen=frozen, dtype=dtype)


def backward(tape: Tape) -> dict[str, np.ndarray]:
    return tape.backward()


def grad_check(
    tape: Tape,
    epsilon: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    numeric_dtype=np.longdouble,
) -> dict[str, float]:
    """Compare analytic parameter gradients against central differences.

    Returns the maximum of ``|a - n| / max(|a|, |n|, 1e-8)`` per trainable
    parameter, where ``n = (loss(p + eps) - loss(p - eps)) / (2 eps)``.  The
    perturbed losses are evaluated in ``numeric_dtype`` (x87 extended
    precision by default) so that round-off in the loss does not swamp
    gradient entries many orders of magnitude below the loss.
    ``max_elements`` caps the number of probed elements per parameter
    (chosen by a seeded RNG); ``None`` probes every element.
    """
    if tape.dtype != np.float64:
        raise PrecisionError("grad_check requires a double-precision tape")
    if tape.graph is None:
        raise StateError("tape was not produced by Graph.forward")
    analytic = tape.backward()
    params = {k: np.array(v, dtype=numeric_dtype) for k, v in tape.param_values.items()}
    inputs = {
        k: (v.astype(numeric_dtype) if np.issubdtype(np.asarray(v).dtype, np.floating) else v)
        for k, v in tape.bound_inputs.items()
    }
    rng = np.random.default_rng(seed)

    def loss_at():
        t = tape.graph.forward(inputs, params, frozen=tape.frozen_names, dtype=numeric_dtype)
        return t.loss.value.reshape(-1)[0]

    report = {}
    for name, grad in analytic.items():
        flat = params[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        worst = 0.0
        gflat = grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_at()
            flat[i] = orig - epsilon
            lm = loss_at()
            flat[i] = orig
            num = float((lp - lm) / (2 * epsilon))
            a = float(gflat[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
        report[name] = worst
    return report


# -- elementwise and structural ops ------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def add(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    sa, sb = a.value.shape, b.value.shape
    return a.tape.record(
        "add", (a, b), a.value + b.value, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def mul(a: Node, b) -> Node:
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    return a.tape.record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def square(x: Node) -> Node:
    v = x.value
    return x.tape.record("square", (x,), v * v, lambda g: (2.0 * v * g,))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape.record("relu", (x,), np.where(mask, x.value, 0).astype(x.value.dtype), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.value))
    return x.tape.record("sigmoid", (x,), s, lambda g: (g * s * (1 - s),))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return x.tape.record("tanh", (x,), t, lambda g: (g * (1 - t * t),))


def total(x: Node) -> Node:
    shape = x.value.shape
    return x.tape.record(
        "sum", (x,), np.asarray(x.value.sum(), dtype=x.value.dtype).reshape(1),
        lambda g: (np.full(shape, g.reshape(-1)[0], dtype=x.value.dtype),),
    )


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul shapes {a.value.shape} @ {b.value.shape}")
    av, bv = a.value, b.value
    return a.tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def reshape(x: Node, shape) -> Node:
    src = x.value.shape
    return x.tape.record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(src),))


def permute(x: Node, order) -> Node:
    order = tuple(order)
    if sorted(order) != list(range(x.value.ndim)):
        raise ValueError(f"{order} is not a permutation")
    inv = inverse_permutation(order)
    return x.tape.record(
        "permute", (x,), np.ascontiguousarray(x.value.transpose(order)),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def concat(xs: Sequence[Node], axis: int = 1) -> Node:
    sizes = [x.value.shape[axis] for x in xs]
    value = concat_channels([x.value for x in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return xs[0].tape.record("concat", xs, value, bw)


def crop(x: Node, height: int, width: int) -> Node:
    """Keep the top-left ``height x width`` window of an ``[N, C, H, W]`` node."""
    shape = x.value.shape
    if height > shape[2] or width > shape[3]:
        raise ShapeError(f"cannot crop {shape} to {height}x{width}")
    if (height, width) == shape[2:]:
        return x

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, :, :height, :width] = g
        return (out,)

    return x.tape.record("crop", (x,), np.ascontiguousarray(x.value[:, :, :height, :width]), bw)
