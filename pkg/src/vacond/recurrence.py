"""Gate arithmetic shared by the main cells and the dynamic hyper cell."""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor

GATE_COUNT = {"vanilla": 1, "gru": 3, "lstm": 4}


def gate_count(kind: str) -> int:
    try:
        return GATE_COUNT[kind]
    except KeyError:
        raise ValueError(f"unknown cell kind {kind!r}; choose from {sorted(GATE_COUNT)}") from None


def gate_update(kind: str, fx: Tensor, fh: Tensor, h: Tensor, c: Tensor | None = None):
    """Apply the cell nonlinearity to stacked pre-activations.

    ``fx`` and ``fh`` are [batch, gates*H] and already include their biases.
    Gate order follows the usual (r, z, n) for GRU and (i, f, g, o) for LSTM.
    Returns ``(h_new, c_new)``; ``c_new`` is None except for LSTM.
    """
    H = h.data.shape[1]
    if kind == "vanilla":
        return ad.tanh(fx + fh), None
    if kind == "gru":
        s = ad.sigmoid(fx[:, : 2 * H] + fh[:, : 2 * H])
        r = s[:, :H]
        z = s[:, H:]
        n = ad.tanh(fx[:, 2 * H :] + r * fh[:, 2 * H :])
        return n + z * (h - n), None
    if kind == "lstm":
        g = fx + fh
        s = ad.sigmoid(g)
        i = s[:, :H]
        f = s[:, H : 2 * H]
        o = s[:, 3 * H :]
        cand = ad.tanh(g[:, 2 * H : 3 * H])
        c_new = f * c + i * cand
        return o * ad.tanh(c_new), c_new
    raise ValueError(f"unknown cell kind {kind!r}")
