import numpy as np
import pytest

from vacond import autodiff as ad
from vacond import conditioning as cond
from vacond.autodiff import ShapeError, Tensor
from vacond.cells import CellConfig, Model, ModelError


def _model(cell="gru", conditioning="film", hidden=32, cond_dim=2, seed=0):
    return Model(CellConfig(cell_kind=cell, conditioning=conditioning, hidden_size=hidden, cond_dim=cond_dim), seed=seed)


# ---------------------------------------------------------------- FiLM


def test_film_coefficient_shapes():
    m = _model()
    f = cond.film_generate([0.2, -0.4], m.params, m.config)
    for v in (f.alpha_h, f.beta_h, f.alpha_x, f.beta_x):
        assert v.data.shape == (1, 96)


@pytest.mark.parametrize("cell,rows", [("vanilla", 32), ("gru", 96), ("lstm", 128)])
def test_film_rows_follow_gate_count(cell, rows):
    m = _model(cell)
    assert cond.film_generate([0.0, 0.0], m.params, m.config).alpha_h.data.shape == (1, rows)


def test_film_identity_initialization():
    m = _model()
    for phi in ([-1.0, 1.0], [0.3, 0.7], [0.0, 0.0]):
        f = cond.film_generate(phi, m.params, m.config)
        assert np.array_equal(f.alpha_h.data, np.ones((1, 96)))
        assert np.array_equal(f.alpha_x.data, np.ones((1, 96)))
        assert np.array_equal(f.beta_h.data, np.zeros((1, 96)))
        assert np.array_equal(f.beta_x.data, np.zeros((1, 96)))


def test_film_generate_is_deterministic():
    m = _model(seed=3)
    rng = np.random.default_rng(0)
    for name, t in m.params.items():
        m.params.set(name, t.data + 0.1 * rng.standard_normal(t.data.shape))
    a = cond.film_generate([0.1, 0.2], m.params, m.config)
    b = cond.film_generate([0.1, 0.2], m.params, m.config)
    assert np.array_equal(a.alpha_h.data, b.alpha_h.data)
    assert np.array_equal(a.beta_x.data, b.beta_x.data)


def test_film_dimension_mismatch():
    m = _model()
    with pytest.raises(cond.ConditioningError):
        cond.film_generate([0.1, 0.2, 0.3], m.params, m.config)
    with pytest.raises(cond.ConditioningError, match=r"\[-1, 1\]"):
        cond.film_generate([1.5, 0.0], m.params, m.config)


def test_film_apply_examples():
    F = Tensor([0.5, -1.0])
    assert np.array_equal(cond.film_apply(F, Tensor([2.0, 3.0]), Tensor([1.0, 0.0])).data, [2.0, -3.0])
    assert np.array_equal(cond.film_apply(F, Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).data, F.data)
    assert np.array_equal(cond.film_apply(F, Tensor([0.0, 0.0]), Tensor([4.0, 5.0])).data, [4.0, 5.0])
    with pytest.raises(ShapeError):
        cond.film_apply(F, Tensor([1.0]), Tensor([0.0, 0.0]))


def test_film_apply_gradients():
    rng = np.random.default_rng(1)
    ts = [Tensor(rng.standard_normal(5), requires_grad=True) for _ in range(3)]
    with ad.Tape() as tape:
        loss = ad.tsum(ad.tanh(cond.film_apply(*ts)))
    ad.backward(tape, loss)

    def f():
        return float(np.sum(np.tanh(ts[1].data * ts[0].data + ts[2].data)))

    for t in ts:
        assert ad.relative_error(t.grad, ad.numerical_grad(f, t)) < 1e-6


# ---------------------------------------------------------------- StaticHyper


def test_static_flat_size_includes_both_bias_vectors():
    cfg = CellConfig(cell_kind="gru", conditioning="static_hyper", hidden_size=32, cond_dim=2)
    # W_x + W_h + separate input and recurrent biases
    assert cond.static_flat_size(cfg) == 3 * 32 * 1 + 3 * 32 * 32 + 2 * 3 * 32 == 3360


@pytest.mark.parametrize("cell,gates", [("vanilla", 1), ("gru", 3), ("lstm", 4)])
def test_static_bundle_gate_groups(cell, gates):
    m = _model(cell, "static_hyper", hidden=8)
    w = cond.statichyper_generate([0.1, -0.2], m.params, m.config)
    assert w.w_x.data.shape == (1, gates * 8, 1)
    assert w.w_h.data.shape == (1, gates * 8, 8)
    assert w.b_x.data.shape == w.b_h.data.shape == (1, gates * 8)


def test_static_generation_is_pure_and_phi_sensitive():
    m = _model("gru", "static_hyper", hidden=8)
    a = cond.statichyper_generate([0.1, -0.2], m.params, m.config)
    b = cond.statichyper_generate([0.1, -0.2], m.params, m.config)
    c = cond.statichyper_generate([0.1, 0.9], m.params, m.config)
    assert np.array_equal(a.w_h.data, b.w_h.data)
    assert not np.array_equal(a.w_h.data, c.w_h.data)


# ---------------------------------------------------------------- DynamicHyper


def test_dynamic_step_shapes():
    m = _model("gru", "dynamic_hyper")
    st = cond.initial_hyper_state(m.config, 1, np.float64)
    z_h, z_x, new = cond.dynamichyper_step(Tensor([[0.1, 0.2]]), Tensor(np.zeros((1, 32))), st, m.params, m.config)
    assert z_h.data.shape == z_x.data.shape == (1, 32)
    assert new.h.data.shape == (1, 8)


def test_dynamic_zero_vanilla_hyper_cell_outputs_zero_state():
    m = _model("vanilla", "dynamic_hyper")
    for name in m.params:
        if name.startswith("hyper.cell."):
            m.params.set(name, np.zeros_like(m.params[name].data))
    rng = np.random.default_rng(0)
    st = cond.HyperState(Tensor(rng.uniform(-1, 1, (1, 8))))
    _, _, new = cond.dynamichyper_step(Tensor([[0.5, -0.5]]), Tensor(rng.uniform(-1, 1, (1, 32))), st, m.params, m.config)
    assert np.array_equal(new.h.data, np.zeros((1, 8)))


def test_dynamic_state_mismatch_rejected():
    m = _model("gru", "dynamic_hyper")
    bad = cond.HyperState(Tensor(np.zeros((1, 5))))
    with pytest.raises(cond.ConditioningError):
        cond.dynamichyper_step(Tensor([[0.0, 0.0]]), Tensor(np.zeros((1, 32))), bad, m.params, m.config)


def test_dynamic_modulate_identity_and_zero():
    m = _model("gru", "dynamic_hyper", hidden=8)
    rng = np.random.default_rng(1)
    F_h, F_x = Tensor(rng.standard_normal((1, 24))), Tensor(rng.standard_normal((1, 24)))
    z = Tensor(rng.standard_normal((1, 32)))
    mh, mx = cond.dynamic_modulate(z, z, F_h, F_x, m.params, m.config)
    assert np.array_equal(mh.data, F_h.data) and np.array_equal(mx.data, F_x.data)
    for head in ("hyper.d_h", "hyper.d_x"):
        m.params.set(f"{head}.l2.b", np.zeros(24))
    mh, mx = cond.dynamic_modulate(z, z, F_h, F_x, m.params, m.config)
    assert np.array_equal(mh.data, np.zeros((1, 24))) and np.array_equal(mx.data, np.zeros((1, 24)))
    with pytest.raises(ShapeError):
        cond.dynamic_modulate(z, z, Tensor(np.ones((1, 23))), F_x, m.params, m.config)


def _perturb(m, scale=0.2, seed=0):
    rng = np.random.default_rng(seed)
    for name, t in m.params.items():
        m.params.set(name, t.data + scale * rng.standard_normal(t.data.shape))


def test_dynamic_step_gradient_wrt_phi():
    m = _model("gru", "dynamic_hyper", hidden=8)
    _perturb(m)
    rng = np.random.default_rng(2)
    phi = Tensor(rng.uniform(-0.5, 0.5, (1, 2)), requires_grad=True)
    h = Tensor(rng.uniform(-0.5, 0.5, (1, 8)))
    st = cond.HyperState(Tensor(rng.uniform(-0.5, 0.5, (1, 8))))
    w = rng.standard_normal((1, 32))

    def run():
        z_h, _, _ = cond.dynamichyper_step(phi, h, st, m.params, m.config)
        return ad.tsum(z_h * Tensor(w))

    with ad.Tape() as tape:
        loss = run()
    ad.backward(tape, loss)

    def f():
        with ad.no_grad():
            return run().item()

    assert ad.relative_error(phi.grad, ad.numerical_grad(f, phi)) < 1e-4


def test_dynamic_modulated_step_gradient():
    m = _model("lstm", "dynamic_hyper", hidden=4)
    _perturb(m, seed=5)
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-1, 1, (1, 1)))
    h = Tensor(rng.uniform(-0.5, 0.5, (1, 4)))
    st = cond.HyperState(Tensor(rng.uniform(-0.5, 0.5, (1, 8))), Tensor(rng.uniform(-0.5, 0.5, (1, 8))))
    phi = Tensor([[0.3, -0.6]])
    p = m.params

    def run():
        z_h, z_x, _ = cond.dynamichyper_step(phi, h, st, p, m.config)
        mh, mx = cond.dynamic_modulate(z_h, z_x, ad.linear(h, p["cell.w_h"]), ad.linear(x, p["cell.w_x"]), p, m.config)
        return ad.tsum(ad.tanh(mh + mx))

    with ad.Tape() as tape:
        loss = run()
    ad.backward(tape, loss, p)

    def f():
        with ad.no_grad():
            return run().item()

    for name in ("hyper.cell.w_x", "hyper.f_h.l0.w", "hyper.d_x.l2.w", "cell.w_h"):
        assert ad.relative_error(p[name].grad, ad.numerical_grad(f, p[name])) < 1e-4, name


# ---------------------------------------------------------------- configuration


def test_config_validation():
    with pytest.raises(ModelError):
        CellConfig(cell_kind="rnn2")
    with pytest.raises(ModelError):
        CellConfig(conditioning="bias")
    with pytest.raises(ModelError):
        CellConfig(hidden_size=0)
    with pytest.raises(ModelError):
        CellConfig(conditioning="concat", hyper_hidden=8)
    cfg = CellConfig(conditioning="dynamic_hyper")
    assert (cfg.hyper_hidden, cfg.z_dim) == (8, 32)
