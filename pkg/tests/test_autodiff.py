import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vacond import autodiff as ad
from vacond.autodiff import ParamStore, ShapeError, TapeError, Tensor


def _grad_of(fn, *arrays):
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*ts)
    ad.backward(tape, out)
    return out, [t.grad for t in ts]


def test_matmul_identity_and_arithmetic():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)
    out = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[5.0], [7.0]]))
    assert np.array_equal(out.data, [[5.0], [0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    A = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    B = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tsum(ad.matmul(A, B))
    ad.backward(tape, loss)

    def f():
        return float(np.sum(A.data @ B.data))

    assert ad.relative_error(A.grad, ad.numerical_grad(f, A)) < 1e-6
    assert ad.relative_error(B.grad, ad.numerical_grad(f, B)) < 1e-6


def test_elementwise_values():
    assert ad.elementwise("tanh", Tensor([0.0])).data.tolist() == [0.0]
    assert np.allclose(ad.elementwise("leaky_relu", Tensor([-1.0, 2.0])).data, [-0.1, 2.0])
    assert np.allclose(ad.elementwise("sigmoid", Tensor([0.0])).data, [0.5])
    assert np.allclose(ad.elementwise("sub", Tensor([3.0]), Tensor([1.0])).data, [2.0])
    with pytest.raises(ValueError, match="unknown elementwise op"):
        ad.elementwise("cosh", Tensor([0.0]))


def test_binary_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 1))), Tensor(np.ones((2, 2))))


def test_scalar_broadcast_allowed():
    assert np.array_equal((Tensor([1.0, 2.0]) * 3.0).data, [3.0, 6.0])
    assert np.array_equal((2.0 - Tensor([1.0, 2.0])).data, [1.0, 0.0])


@pytest.mark.parametrize("op", ["mul", "add", "sub", "tanh", "sigmoid", "leaky_relu"])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal(6) + 0.05, requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    args = (a, b) if op in ("mul", "add", "sub") else (a,)
    with ad.Tape() as tape:
        loss = ad.tsum(ad.elementwise(op, *args) * Tensor(np.arange(1.0, 7.0)))
    ad.backward(tape, loss)

    def f():
        return float(np.sum(ad.elementwise(op, *args).data * np.arange(1.0, 7.0)))

    for t in args:
        assert ad.relative_error(t.grad, ad.numerical_grad(f, t)) < 1e-6


def test_backward_simple_cases():
    _, (g,) = _grad_of(ad.tsum, [0.5, -1.0, 2.0])
    assert np.array_equal(g, [1.0, 1.0, 1.0])
    _, (g,) = _grad_of(lambda w: ad.tsum(w * w), [1.0, 2.0])
    assert np.array_equal(g, [2.0, 4.0])


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        out = w * 2.0
    with pytest.raises(TapeError, match="scalar"):
        ad.backward(tape, out)
    with pytest.raises(TapeError, match="empty"):
        ad.backward(ad.Tape(), Tensor(1.0, requires_grad=True))


def test_gradients_accumulate_until_reset():
    ps = ParamStore()
    w = ps.add("w", [1.0, 2.0])
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.tsum(w * w)
        ad.backward(tape, loss, ps)
    assert np.array_equal(w.grad, [4.0, 8.0])
    ps.zero_grad()
    assert w.grad is None


def test_unreachable_parameters_get_exact_zero():
    ps = ParamStore()
    used = ps.add("used", [1.0])
    unused = ps.add("unused", [[3.0, 4.0]])
    with ad.Tape() as tape:
        loss = ad.tsum(used * 5.0)
    ad.backward(tape, loss, ps)
    assert np.array_equal(unused.grad, np.zeros((1, 2)))
    assert np.array_equal(used.grad, [5.0])


def test_no_grad_suspends_recording():
    w = Tensor(np.ones(2), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_grad():
            _ = w * 2.0
        assert len(tape) == 0


def test_paramstore_invariants():
    ps = ParamStore()
    ps.add("a", np.zeros((2, 3)))
    with pytest.raises(KeyError, match="duplicate"):
        ps.add("a", np.zeros(1))
    with pytest.raises(ShapeError, match="immutable"):
        ps.set("a", np.zeros((3, 2)))
    ps.freeze("a")
    assert ps.num_trainable() == 0


def test_unrolled_vanilla_rnn_gradients():
    rng = np.random.default_rng(2)
    ps = ParamStore()
    W_h = ps.add("W_h", 0.5 * rng.standard_normal((4, 4)))
    W_x = ps.add("W_x", rng.standard_normal((4, 1)))
    b = ps.add("b", 0.1 * rng.standard_normal(4))
    xs = rng.standard_normal((16, 1, 1))

    def run():
        h = Tensor(np.zeros((1, 4)))
        total = Tensor(0.0)
        for x in xs:
            h = ad.tanh(ad.bias_add(ad.linear(h, W_h) + ad.linear(Tensor(x), W_x), b))
            total = total + ad.tsum(h * h)
        return total

    with ad.Tape() as tape:
        loss = run()
    ad.backward(tape, loss, ps)

    def f():
        with ad.no_grad():
            return run().item()

    for t in (W_h, W_x, b):
        assert ad.relative_error(t.grad, ad.numerical_grad(f, t)) < 1e-4


def test_determinism():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    r1 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    r2 = ad.tanh(ad.matmul(Tensor(a), Tensor(b))).data
    assert r1.tobytes() == r2.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=16))
def test_ops_keep_finite_inputs_finite(values):
    t = Tensor(np.array(values))
    for op in ("tanh", "sigmoid", "leaky_relu", "abs"):
        assert ad.is_finite(ad.elementwise(op, t))
