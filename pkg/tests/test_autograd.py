import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from renetseg import autograd as ag
from renetseg.autograd import Graph, PrecisionError, StateError, Tape, grad_check


def _loss_graph(fn):
    return Graph(lambda tape, ins, p: fn(tape, ins, p), ["x"])


def test_identity_graph():
    g = Graph(lambda tape, ins, p: {"y": ins["x"]}, ["x"])
    assert g.forward({"x": np.array([7.0])}, {}).outputs["y"].value[0] == 7


def test_relu_clamps_negative():
    g = Graph(lambda tape, ins, p: {"y": ag.relu(ins["x"])}, ["x"])
    assert g.forward({"x": np.array([-3.0])}, {}).outputs["y"].value[0] == 0


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    w = {"w": rng.standard_normal((4, 4))}
    x = rng.standard_normal((3, 4))
    g = Graph(lambda tape, ins, p: ag.total(ag.tanh(ag.matmul(ins["x"], p["w"]))), ["x"])
    a = g.forward({"x": x}, w).loss.value
    b = g.forward({"x": x}, w).loss.value
    assert a.tobytes() == b.tobytes()


def test_unbound_input():
    g = Graph(lambda tape, ins, p: ins["x"], ["x", "y"])
    with pytest.raises(KeyError):
        g.forward({"x": np.ones(1)}, {})


def test_sum_gradient_is_ones():
    g = Graph(lambda tape, ins, p: ag.total(p["x"]), [])
    grads = g.forward({}, {"x": np.arange(6.0).reshape(2, 3)}).backward()
    np.testing.assert_array_equal(grads["x"], np.ones((2, 3)))


def test_square_gradient():
    g = Graph(lambda tape, ins, p: ag.total(ag.square(p["x"])), [])
    assert g.forward({}, {"x": np.array([3.0])}).backward()["x"][0] == 6.0


def test_backward_before_forward():
    with pytest.raises(StateError):
        Tape().backward()


def test_grad_check_quadratic():
    rng = np.random.default_rng(1)
    g = Graph(lambda tape, ins, p: ag.total(ag.square(ag.add(p["a"], ins["x"]))), ["x"])
    tape = g.forward({"x": rng.standard_normal(5)}, {"a": rng.standard_normal(5)})
    assert max(grad_check(tape).values()) < 1e-9


def test_grad_check_requires_double():
    g = Graph(lambda tape, ins, p: ag.total(p["a"]), [])
    tape = g.forward({}, {"a": np.ones(3, np.float32)})
    with pytest.raises(PrecisionError):
        grad_check(tape)


def test_frozen_params_get_no_entry():
    g = Graph(lambda tape, ins, p: ag.total(ag.mul(p["a"], p["b"])), [])
    tape = g.forward({}, {"a": np.ones(2), "b": np.full(2, 3.0)}, frozen=["a"])
    grads = tape.backward()
    assert set(grads) == {"b"}
    assert "a" not in grad_check(tape)


def test_frozen_still_propagates_downstream():
    rng = np.random.default_rng(3)
    vals = {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal((3, 3))}
    x = rng.standard_normal((2, 3))

    def fn(tape, ins, p):
        return ag.total(ag.tanh(ag.matmul(ag.tanh(ag.matmul(ins["x"], p["a"])), p["b"])))

    g = Graph(fn, ["x"])
    full = g.forward({"x": x}, vals).backward()
    part = g.forward({"x": x}, vals, frozen=["b"]).backward()
    np.testing.assert_array_equal(full["a"], part["a"])


@pytest.mark.parametrize("op", ["add", "mul", "square", "relu", "sigmoid", "tanh", "matmul", "reshape",
                                "permute", "concat", "crop"])
def test_op_gradients(op):
    rng = np.random.default_rng(abs(hash(op)) % 1000)
    a = rng.standard_normal((2, 3, 4, 4))
    a[np.abs(a) < 1e-3] = 0.5  # keep away from the relu kink
    b = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((4, 5))

    def body(p):
        if op == "add":
            return ag.add(p["a"], p["b"])
        if op == "mul":
            return ag.mul(p["a"], p["b"])
        if op == "square":
            return ag.square(p["a"])
        if op == "relu":
            return ag.relu(p["a"])
        if op == "sigmoid":
            return ag.sigmoid(p["a"])
        if op == "tanh":
            return ag.tanh(p["a"])
        if op == "matmul":
            return ag.matmul(ag.reshape(p["a"], (24, 4)), p["w"])
        if op == "reshape":
            return ag.reshape(p["a"], (6, 16))
        if op == "permute":
            return ag.permute(p["a"], (3, 1, 0, 2))
        if op == "concat":
            return ag.concat([p["a"], p["b"]], axis=1)
        return ag.crop(p["a"], 3, 2)

    def fn(tape, ins, p):
        y = body(p)
        weights = tape.constant(np.linspace(-1, 1, y.value.size).reshape(y.value.shape))
        return ag.total(ag.mul(y, weights))

    tape = Graph(fn, []).forward({}, {"a": a, "b": b, "w": w})
    report = grad_check(tape)
    assert max(report.values()) < 1e-6, report


@given(st.integers(0, 10_000))
def test_gradient_linearity_over_graph_copies(seed):
    rng = np.random.default_rng(seed)
    vals = {"a": rng.standard_normal((3, 3))}
    x1, x2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))

    def branch(x, p):
        return ag.total(ag.sigmoid(ag.matmul(x, p["a"])))

    g1 = Graph(lambda t, i, p: branch(i["x"], p), ["x"])
    both = Graph(lambda t, i, p: ag.add(branch(i["x"], p), branch(i["y"], p)), ["x", "y"])
    s = both.forward({"x": x1, "y": x2}, vals).backward()["a"]
    parts = g1.forward({"x": x1}, vals).backward()["a"] + g1.forward({"x": x2}, vals).backward()["a"]
    np.testing.assert_allclose(s, parts, rtol=1e-12, atol=1e-14)


def test_release_frees_activations():
    import gc
    import weakref

    gc.disable()
    try:
        tape = ag.Tape()
        x = tape.param("x", np.ones((50, 50)))
        y = ag.relu(ag.mul(x, x))
        tape.loss = ag.total(y)
        probe = weakref.ref(y.value)
        tape.backward()
        del x, y
        tape.release()
        assert probe() is None and not tape.nodes
    finally:
        gc.enable()
