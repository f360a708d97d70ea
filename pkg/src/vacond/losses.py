"""Training objectives: L1, multi-resolution STFT, and their weighted sum.

Each loss accepts a prediction as a :class:`Tensor` (differentiable, records
on the active tape) or as a plain array (returns a float). Inputs are [T] or
[B, T]; batched losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dsp import Waveform, frame_signal, pad_signal, window_array

FFT_SIZES = (128, 512, 2048)
MAG_FLOOR = 1e-5
_LN10 = np.log(10.0)


class LossError(ValueError):
    pass


@dataclass
class LossValue:
    total: Tensor | float
    components: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item() if isinstance(self.total, Tensor) else float(self.total)


def _unwrap(x):
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, Waveform):
        return None, x.samples
    return None, np.asarray(x, dtype=np.float64)


def _pair(pred, target):
    pt, p = _unwrap(pred)
    _, t = _unwrap(target)
    if p.shape != t.shape:
        raise LossError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    if p.ndim not in (1, 2):
        raise LossError(f"expected [T] or [B, T] signals, got shape {p.shape}")
    return pt, p, t.astype(p.dtype, copy=False)


def _finish(pt: Tensor | None, value: float, grad_fn, dtype):
    if pt is None:
        return float(value)
    return ad.custom([pt], np.asarray(value, dtype=dtype), lambda g: [g * grad_fn()])


def l1_loss(pred, target):
    """Mean absolute difference."""
    pt, p, t = _pair(pred, target)
    d = p - t
    return _finish(pt, np.mean(np.abs(d)), lambda: np.sign(d) / d.size, p.dtype)


# ---------------------------------------------------------------- MR-STFT


def _magnitudes(x: np.ndarray, fft: int, hop: int):
    frames = frame_signal(pad_signal(x, fft, "zero"), fft, hop) * window_array("hann", fft)
    spec = np.fft.rfft(frames, axis=-1)
    return spec, np.abs(spec)


def spectral_convergence(pred, target, fft_size: int, hop: int | None = None) -> float:
    """||M_t - M_p||_F / ||M_t||_F for one resolution (batch-averaged)."""
    _, p, t = _pair(pred, target)
    hop = hop or fft_size // 4
    Mp = _magnitudes(p.astype(np.float64), fft_size, hop)[1]
    Mt = _magnitudes(t.astype(np.float64), fft_size, hop)[1]
    nd = np.sqrt(np.sum((Mt - Mp) ** 2, axis=(-2, -1)))
    nt = np.maximum(np.sqrt(np.sum(Mt**2, axis=(-2, -1))), 1e-12)
    return float(np.mean(nd / nt))


def _resolution_terms(p: np.ndarray, t: np.ndarray, fft: int, hop: int, floor: float, want_grad: bool):
    """Per-item 0.5 * (spectral convergence + log-magnitude L1) and optionally its gradient w.r.t. p."""
    win = window_array("hann", fft)
    P, Mp = _magnitudes(p, fft, hop)
    Mt = _magnitudes(t, fft, hop)[1]
    diff = Mt - Mp
    nd = np.sqrt(np.sum(diff**2, axis=(-2, -1)))
    nt = np.sqrt(np.sum(Mt**2, axis=(-2, -1)))
    nt_safe = np.maximum(nt, 1e-12)
    sc = nd / nt_safe
    lt = np.log10(np.maximum(Mt, floor))
    lp = np.log10(np.maximum(Mp, floor))
    count = Mp.shape[-2] * Mp.shape[-1]
    lm = np.sum(np.abs(lt - lp), axis=(-2, -1)) / count
    terms = 0.5 * (sc + lm)
    if not want_grad:
        return terms, None

    # d(term)/d|P|
    nd_safe = np.where(nd > 0, nd, 1.0)
    g_sc = np.where((nd > 0)[..., None, None], -diff / (nd_safe * nt_safe)[..., None, None], 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_lm = np.where(Mp > floor, -np.sign(lt - lp) / (count * _LN10 * Mp), 0.0)
    G = 0.5 * (g_sc + g_lm)
    # through |P| to the complex bins
    with np.errstate(divide="ignore", invalid="ignore"):
        C = np.where(Mp > 0, G * P / Mp, 0.0)
    # adjoint of the real FFT: interior bins appear twice in irfft
    C[..., 1 : fft // 2] *= 0.5
    dframes = fft * np.fft.irfft(C, n=fft, axis=-1) * win
    # overlap-add back onto the padded signal, then drop the padding
    n_frames = dframes.shape[-2]
    padded = p.shape[-1] + 2 * (fft // 2)
    out = np.zeros(p.shape[:-1] + (padded,))
    lead = p.shape[:-1]
    for q in range(fft // hop):
        chunk = dframes[..., q * hop : (q + 1) * hop].reshape(lead + (n_frames * hop,))
        out[..., q * hop : q * hop + n_frames * hop] += chunk
    half = fft // 2
    return terms, out[..., half : half + p.shape[-1]]


def mrstft_loss(pred, target, fft_sizes=FFT_SIZES, floor: float = MAG_FLOOR, return_terms: bool = False):
    """Sum over resolutions of 0.5 * (spectral convergence + mean |log10 magnitude difference|).

    Hann window, hop = fft/4, zero centre padding. Batched inputs average over the batch.
    """
    pt, p, t = _pair(pred, target)
    if p.shape[-1] < max(fft_sizes):
        raise LossError(f"signals must have at least {max(fft_sizes)} samples, got {p.shape[-1]}")
    for n in fft_sizes:
        if n < 4 or n & (n - 1):
            raise LossError(f"FFT sizes must be powers of two >= 4, got {n}")
    p64 = p.astype(np.float64)
    t64 = t.astype(np.float64)
    batch = 1 if p.ndim == 1 else p.shape[0]
    total = 0.0
    grad = np.zeros_like(p64) if pt is not None else None
    per_res = {}
    for n in fft_sizes:
        terms, g = _resolution_terms(p64, t64, n, n // 4, floor, pt is not None)
        value = float(np.sum(terms)) / batch
        per_res[f"mrstft_{n}"] = value
        total += value
        if grad is not None:
            grad += g / batch
    result = _finish(pt, total, lambda: grad.astype(p.dtype), p.dtype)
    return (result, per_res) if return_terms else result


def combined_loss(pred, target, w_l1: float = 1.0, w_stft: float = 1.0) -> LossValue:
    """w_l1 * l1 + w_stft * mrstft with a per-component breakdown."""
    if not (np.isfinite(w_l1) and np.isfinite(w_stft)) or w_l1 < 0 or w_stft < 0 or (w_l1 == 0 and w_stft == 0):
        raise LossError(f"weights must be finite, >= 0 and not both zero; got w_l1={w_l1}, w_stft={w_stft}")
    components: dict[str, float] = {}
    parts = []
    if w_l1 > 0:
        l1 = l1_loss(pred, target)
        components["l1"] = l1.item() if isinstance(l1, Tensor) else l1
        parts.append((w_l1, l1))
    if w_stft > 0:
        ms, per_res = mrstft_loss(pred, target, return_terms=True)
        components["mrstft"] = ms.item() if isinstance(ms, Tensor) else ms
        components.update(per_res)
        parts.append((w_stft, ms))
    total = None
    for w, v in parts:
        term = v * w if w != 1.0 else v
        total = term if total is None else total + term
    return LossValue(total, components)
