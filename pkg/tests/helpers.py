"""Shared test utilities: gradient checking and small synthetic signals."""

from __future__ import annotations

import numpy as np

from vacond import autodiff as ad
from vacond.cells import CellConfig, Model, RecurrentState, run_sequence
from vacond.conditioning import HyperState

CELLS = ("vanilla", "gru", "lstm")
CONDITIONINGS = ("concat", "film", "static_hyper", "dynamic_hyper")


def perturbed_model(cell: str, conditioning: str, hidden: int = 8, cond_dim: int = 2, seed: int = 0,
                    scale: float = 0.2, dtype=np.float64) -> Model:
    """A model moved away from its structured initialization so every path carries gradient."""
    m = Model(CellConfig(cell_kind=cell, conditioning=conditioning, hidden_size=hidden, cond_dim=cond_dim),
              seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, t in m.params.items():
        m.params.set(name, t.data + scale * rng.standard_normal(t.data.shape))
    return m


def random_state(model: Model, batch: int, rng) -> RecurrentState:
    st = model.initial_state(batch)

    def rand(t):
        return None if t is None else ad.Tensor(rng.uniform(-0.5, 0.5, t.data.shape))

    hyper = None if st.hyper is None else HyperState(rand(st.hyper.h), rand(st.hyper.c))
    return RecurrentState(rand(st.h), rand(st.c), hyper)


def sequence_loss(model, x, phi, y, state0, engine="fused"):
    out, _ = run_sequence(model, x, phi, state0=state0, engine=engine)
    d = out - ad.Tensor(y)
    return ad.mean(d * d)


def analytic_grads(model, x, phi, y, state0, engine="fused") -> dict[str, np.ndarray]:
    model.params.zero_grad()
    with ad.Tape() as tape:
        loss = sequence_loss(model, x, phi, y, state0, engine)
    ad.backward(tape, loss, model.params)
    grads = {n: t.grad.copy() for n, t in model.params.items()}
    model.params.zero_grad()
    return grads


def gradient_check(model, x, phi, y, state0, eps: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients."""
    grads = analytic_grads(model, x, phi, y, state0)

    def f():
        with ad.no_grad():
            return sequence_loss(model, x, phi, y, state0).item()

    return {
        name: ad.relative_error(grads[name], ad.numerical_grad(f, t, eps), floor)
        for name, t in model.params.items()
    }


def gradient_case(cell: str, conditioning: str, seed: int = 0, hidden: int = 8, steps: int = 16, batch: int = 2):
    rng = np.random.default_rng(seed)
    m = perturbed_model(cell, conditioning, hidden=hidden, seed=seed)
    x = rng.uniform(-1, 1, (batch, steps))
    phi = rng.uniform(-1, 1, (batch, 2))
    y = rng.uniform(-1, 1, (batch, steps))
    return m, x, phi, y, random_state(m, batch, rng)


def sine(freq: float, seconds: float = 1.0, amp: float = 1.0, sample_rate: int = 48000, phase: float = 0.0):
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amp * np.sin(2 * np.pi * freq * t + phase)


def impulse_train(spacing_s: float = 0.01, seconds: float = 1.0, sample_rate: int = 48000, amp: float = 1.0):
    x = np.zeros(int(round(seconds * sample_rate)))
    x[:: int(round(spacing_s * sample_rate))] = amp
    return x
