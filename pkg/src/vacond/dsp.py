"""STFT, DCT and sinusoidal (SMS-style) analysis / synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from scipy.signal import get_window


class DSPConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio with its sample rate. Samples are stored read-only."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) <= 0:
            raise DSPConfigError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(arr)):
            raise DSPConfigError("waveform contains non-finite samples")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def samples_of(w) -> np.ndarray:
    return w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)


# ---------------------------------------------------------------- STFT


@dataclass
class Spectrogram:
    frames: np.ndarray  # [num_frames, fft_size // 2 + 1] complex
    fft_size: int
    hop_size: int
    window: str
    padding: str

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)


def _check_stft_args(fft_size: int, hop: int) -> None:
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise DSPConfigError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop <= fft_size:
        raise DSPConfigError(f"hop must satisfy 0 < hop <= fft_size, got {hop}")


def window_array(name: str, size: int) -> np.ndarray:
    if name not in ("hann", "blackman", "blackmanharris"):
        raise DSPConfigError(f"unsupported window {name!r}")
    return get_window(name, size, fftbins=True)


def pad_signal(x: np.ndarray, fft_size: int, padding: str) -> np.ndarray:
    """Center padding by fft_size//2 ('zero' / 'reflect'); 'none' only pads up to one frame."""
    half = fft_size // 2
    width = [(0, 0)] * (x.ndim - 1)
    if padding == "zero":
        return np.pad(x, width + [(half, half)])
    if padding == "reflect":
        if x.shape[-1] < 2:
            return np.pad(x, width + [(half, half)])
        return np.pad(x, width + [(half, half)], mode="reflect")
    if padding == "none":
        short = fft_size - x.shape[-1]
        return np.pad(x, width + [(0, short)]) if short > 0 else x
    raise DSPConfigError(f"unknown padding {padding!r}")


def frame_signal(x: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    """[..., T] -> [..., num_frames, fft_size] view."""
    return np.lib.stride_tricks.sliding_window_view(x, fft_size, axis=-1)[..., ::hop, :]


def stft_frames(x: np.ndarray, fft_size: int, hop: int, window: str = "hann", padding: str = "zero") -> np.ndarray:
    """Batched STFT: [..., T] -> complex [..., num_frames, fft_size//2 + 1]."""
    _check_stft_args(fft_size, hop)
    xp = pad_signal(np.asarray(x, dtype=np.float64), fft_size, padding)
    frames = frame_signal(xp, fft_size, hop)
    return np.fft.rfft(frames * window_array(window, fft_size), axis=-1)


def stft(w, fft_size: int, hop: int, window: str = "hann", padding: str = "zero") -> Spectrogram:
    frames = stft_frames(samples_of(w), fft_size, hop, window, padding)
    return Spectrogram(frames, fft_size, hop, window, padding)


def num_frames(length: int, fft_size: int, hop: int, padding: str = "zero") -> int:
    padded = length + 2 * (fft_size // 2) if padding in ("zero", "reflect") else max(length, fft_size)
    return (padded - fft_size) // hop + 1


# ---------------------------------------------------------------- DCT


def dct(x) -> np.ndarray:
    """Orthonormal DCT-II."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DSPConfigError("dct of an empty sequence")
    return scipy.fft.dct(x, type=2, norm="ortho")


def idct(c) -> np.ndarray:
    """Inverse of :func:`dct` (orthonormal DCT-III)."""
    c = np.asarray(c, dtype=np.float64)
    if c.size == 0:
        raise DSPConfigError("idct of an empty sequence")
    return scipy.fft.idct(c, type=2, norm="ortho")


# ---------------------------------------------------------------- sinusoidal model


@dataclass
class SineConfig:
    window_size: int = 2001
    fft_size: int = 2048
    hop: int = 128
    window: str = "blackmanharris"
    max_tracks: int = 100
    peak_threshold_db: float = -80.0
    freq_dev_offset: float = 20.0
    freq_dev_slope: float = 0.01
    min_track_frames: int = 3

    def validate(self) -> None:
        if self.window_size < 3 or self.window_size > self.fft_size:
            raise DSPConfigError("window_size must be in [3, fft_size]")
        _check_stft_args(self.fft_size, self.hop)
        if self.max_tracks < 1:
            raise DSPConfigError("max_tracks must be >= 1")
        for v in (self.peak_threshold_db, self.freq_dev_offset, self.freq_dev_slope):
            if not math.isfinite(v):
                raise DSPConfigError("thresholds must be finite")


@dataclass
class SinusoidTrack:
    """One partial: per-frame linear amplitude, frequency (Hz) and phase (rad).

    Frame j is centred on sample j * hop.
    """

    birth: int
    hop: int
    freqs: np.ndarray
    amps: np.ndarray
    phases: np.ndarray

    @property
    def death(self) -> int:
        return self.birth + self.freqs.size - 1

    def __len__(self) -> int:
        return self.freqs.size


def _spectra(x: np.ndarray, cfg: SineConfig):
    """Zero-phase windowed magnitude (dB) and unwrapped phase spectra for every frame."""
    M = cfg.window_size
    N = cfg.fft_size
    hM1 = (M + 1) // 2
    hM2 = M // 2
    w = get_window(cfg.window, M, fftbins=False)
    w = w / w.sum()
    xp = np.concatenate([np.zeros(hM2), x, np.zeros(hM2)])
    n_frames = (x.size - 1) // cfg.hop + 1
    frames = frame_signal(xp, M, cfg.hop)[:n_frames] * w
    buf = np.zeros((n_frames, N))
    buf[:, :hM1] = frames[:, hM2:]
    buf[:, N - hM2 :] = frames[:, :hM2]
    X = np.fft.rfft(buf, axis=1)
    absX = np.abs(X)
    absX[absX < np.finfo(float).eps] = np.finfo(float).eps
    mX = 20 * np.log10(absX)
    pX = np.unwrap(np.angle(X), axis=1)
    return mX, pX


def _peaks(mX: np.ndarray, pX: np.ndarray, threshold: float):
    """Local maxima above threshold with parabolic refinement in dB."""
    mid = mX[1:-1]
    mask = (mid > threshold) & (mid > mX[:-2]) & (mid > mX[2:])
    k = np.nonzero(mask)[0] + 1
    if k.size == 0:
        return k.astype(float), k.astype(float), k.astype(float)
    l, v, r = mX[k - 1], mX[k], mX[k + 1]
    loc = k + 0.5 * (l - r) / (l - 2 * v + r)
    mag = v - 0.25 * (l - r) * (loc - k)
    phase = np.interp(loc, np.arange(pX.size), pX)
    return loc, mag, phase


def sinusoidal_analysis(w, cfg: SineConfig | None = None, sample_rate: int | None = None) -> list[SinusoidTrack]:
    """Peak picking + frame-to-frame continuation; returns the detected partials."""
    cfg = cfg or SineConfig()
    cfg.validate()
    x = samples_of(w)
    fs = w.sample_rate if isinstance(w, Waveform) else sample_rate
    if fs is None:
        raise DSPConfigError("sample_rate is required for raw arrays")
    if x.size < cfg.window_size:
        raise DSPConfigError(f"signal shorter ({x.size}) than the analysis window ({cfg.window_size})")
    if not np.any(x):
        return []
    mX, pX = _spectra(x, cfg)

    finished: list[SinusoidTrack] = []
    # active: list of [birth, freqs, amps, phases]
    active: list[list] = []
    for j in range(mX.shape[0]):
        loc, mag, phase = _peaks(mX[j], pX[j], cfg.peak_threshold_db)
        freq = fs * loc / cfg.fft_size
        amp = 2.0 * 10 ** (mag / 20.0)
        order = np.argsort(-mag)[: cfg.max_tracks]
        used = np.zeros(freq.size, dtype=bool)
        survivors = []
        # louder peaks claim their nearest track first
        claimed = np.zeros(len(active), dtype=bool)
        if active:
            last = np.array([tr[1][-1] for tr in active])
            for i in order:
                d = np.where(claimed, np.inf, np.abs(freq[i] - last))
                best = int(np.argmin(d))
                if d[best] < cfg.freq_dev_offset + cfg.freq_dev_slope * freq[i]:
                    claimed[best] = True
                    used[i] = True
                    tr = active[best]
                    tr[1].append(freq[i])
                    tr[2].append(amp[i])
                    tr[3].append(phase[i])
        for ti, tr in enumerate(active):
            if claimed[ti]:
                survivors.append(tr)
            else:
                finished.append(_close(tr, cfg))
        for i in order:
            if used[i] or len(survivors) >= cfg.max_tracks:
                continue
            survivors.append([j, [freq[i]], [amp[i]], [phase[i]]])
        active = survivors
    finished.extend(_close(tr, cfg) for tr in active)
    tracks = [t for t in finished if len(t) >= cfg.min_track_frames]
    tracks.sort(key=lambda t: (t.birth, t.freqs[0]))
    return tracks


def _close(tr: list, cfg: SineConfig) -> SinusoidTrack:
    return SinusoidTrack(tr[0], cfg.hop, np.array(tr[1]), np.array(tr[2]), np.array(tr[3]))


def _cubic_phase(theta0, omega0, theta1, omega1, H: int):
    """Phase polynomial coefficients matching phase and frequency at both ends of a hop."""
    M = np.round(((theta0 + omega0 * H - theta1) + (omega1 - omega0) * H / 2) / (2 * np.pi))
    e = theta1 - theta0 - omega0 * H + 2 * np.pi * M
    a = 3 / H**2 * e - (omega1 - omega0) / H
    b = -2 / H**3 * e + (omega1 - omega0) / H**2
    return a, b


def _render_track(tr: SinusoidTrack, out: np.ndarray, fs: int) -> None:
    """Add one track into ``out`` over the samples it spans."""
    length = out.size
    H = tr.hop
    w = 2 * np.pi * tr.freqs / fs
    th = tr.phases
    A = tr.amps
    n0 = tr.birth * H
    t = np.arange(H)
    # interior segments between consecutive frame centres
    if tr.freqs.size > 1:
        a, b = _cubic_phase(th[:-1], w[:-1], th[1:], w[1:], H)
        ph = th[:-1, None] + w[:-1, None] * t + a[:, None] * t**2 + b[:, None] * t**3
        amp = A[:-1, None] + (A[1:] - A[:-1])[:, None] * (t / H)
        seg = (amp * np.cos(ph)).reshape(-1)
        stop = min(length, n0 + seg.size)
        if stop > n0:
            out[n0:stop] += seg[: stop - n0]
    # fade in over the hop preceding birth
    start = max(0, n0 - H)
    if 0 < n0 <= length:
        tt = np.arange(start - n0, 0)
        out[start:n0] += A[0] * (1 + tt / H) * np.cos(th[0] + w[0] * tt)
    # after the last frame: fade out over one hop, or hold to the end if it is the final frame
    nd = tr.death * H
    if nd < length:
        if nd + H >= length:
            tt = np.arange(0, length - nd)
            env = np.full(tt.size, A[-1])
        else:
            tt = np.arange(0, H)
            env = A[-1] * (1 - tt / H)
        out[nd : nd + tt.size] += env * np.cos(th[-1] + w[-1] * tt)


def sinusoidal_synthesis(tracks: list[SinusoidTrack], length: int, sample_rate: int) -> np.ndarray:
    """Additive resynthesis with linear amplitude and cubic phase interpolation."""
    out = np.zeros(int(length))
    for tr in tracks:
        if np.any(tr.freqs >= sample_rate / 2) or np.any(tr.freqs < 0) or np.any(tr.amps < 0):
            raise DSPConfigError("track frequency outside [0, Nyquist) or negative amplitude")
        _render_track(tr, out, sample_rate)
    return out
