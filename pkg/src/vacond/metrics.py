"""Evaluation metrics: loudness, crest factor, RMS, spectrum difference and the transient error."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from . import dsp
from .dsp import SineConfig, Waveform, samples_of
from .losses import FFT_SIZES, l1_loss, mrstft_loss


class MetricError(ValueError):
    pass


class UnmeasurableLoudnessError(MetricError):
    """Every gating block is below the absolute gate."""


# ---------------------------------------------------------------- TMS decomposition


@dataclass
class TMSConfig:
    sines: SineConfig = field(default_factory=SineConfig)
    block_seconds: float = 1.0
    transient: SineConfig = field(
        default_factory=lambda: SineConfig(window_size=2048, fft_size=2048, hop=512, max_tracks=100)
    )

    def block_length(self, sample_rate: int) -> int:
        return int(round(self.block_seconds * sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TMSConfig":
        return cls(SineConfig(**d["sines"]), float(d["block_seconds"]), SineConfig(**d["transient"]))


@dataclass
class TMSDecomposition:
    sinusoidal: Waveform
    residual1: Waveform
    transient_dct: list[np.ndarray]
    transient_time: Waveform
    noise: Waveform


def tms_decompose(w: Waveform, cfg: TMSConfig | None = None) -> TMSDecomposition:
    """Sines, then transients modelled as sinusoids of the blockwise DCT, then noise."""
    cfg = cfg or TMSConfig()
    fs = w.sample_rate
    x = w.samples
    block = cfg.block_length(fs)
    if x.size < block:
        raise MetricError(f"signal has {x.size} samples; the transient analysis needs at least {block}")
    sines = dsp.sinusoidal_synthesis(dsp.sinusoidal_analysis(w, cfg.sines), x.size, fs)
    residual1 = x - sines
    transient_time = np.zeros_like(x)
    coeffs = []
    for start in range(0, x.size, block):
        seg = residual1[start : start + block]
        if seg.size < cfg.transient.window_size:
            coeffs.append(np.zeros(seg.size))
            continue
        c = dsp.dct(seg)
        tracks = dsp.sinusoidal_analysis(c, cfg.transient, sample_rate=fs)
        modelled = dsp.sinusoidal_synthesis(tracks, c.size, fs)
        coeffs.append(modelled)
        transient_time[start : start + seg.size] = dsp.idct(modelled)
    noise = residual1 - transient_time
    return TMSDecomposition(
        sinusoidal=Waveform(sines, fs),
        residual1=Waveform(residual1, fs),
        transient_dct=coeffs,
        transient_time=Waveform(transient_time, fs),
        noise=Waveform(noise, fs),
    )


def transient_metric(pred: Waveform, target: Waveform, cfg: TMSConfig | None = None) -> float:
    """Multi-resolution STFT loss between the DCT-domain transient parts of two signals."""
    if len(pred) != len(target):
        raise MetricError(f"length mismatch: {len(pred)} vs {len(target)}")
    tp = np.concatenate(tms_decompose(pred, cfg).transient_dct)
    tt = np.concatenate(tms_decompose(target, cfg).transient_dct)
    return float(mrstft_loss(tp, tt, FFT_SIZES))


# ---------------------------------------------------------------- loudness (mono BS.1770)


def k_weighting(sample_rate: int):
    """(b, a) pairs of the two K-weighting biquads at ``sample_rate``."""
    # high shelf
    G, Q, fc = 3.999843853973347, 0.7071752369554196, 1681.974450955533
    K = math.tan(math.pi * fc / sample_rate)
    Vh = 10 ** (G / 20)
    Vb = Vh**0.4996667741545416
    a0 = 1 + K / Q + K * K
    shelf_b = np.array([(Vh + Vb * K / Q + K * K) / a0, 2 * (K * K - Vh) / a0, (Vh - Vb * K / Q + K * K) / a0])
    shelf_a = np.array([1.0, 2 * (K * K - 1) / a0, (1 - K / Q + K * K) / a0])
    # high pass
    Q, fc = 0.5003270373238773, 38.13547087602444
    K = math.tan(math.pi * fc / sample_rate)
    a0 = 1 + K / Q + K * K
    hp_b = np.array([1.0, -2.0, 1.0])
    hp_a = np.array([1.0, 2 * (K * K - 1) / a0, (1 - K / Q + K * K) / a0])
    return (shelf_b, shelf_a), (hp_b, hp_a)


def integrated_loudness(w, sample_rate: int | None = None, block_s: float = 0.4, overlap: float = 0.75) -> float:
    """Gated integrated loudness in LUFS (absolute gate -70, relative gate -10 LU)."""
    x = samples_of(w)
    fs = w.sample_rate if isinstance(w, Waveform) else sample_rate
    if fs is None:
        raise MetricError("sample_rate is required for raw arrays")
    n_block = int(round(block_s * fs))
    if x.size < n_block:
        raise MetricError(f"loudness needs at least {block_s * 1000:.0f} ms ({n_block} samples), got {x.size}")
    (b1, a1), (b2, a2) = k_weighting(fs)
    y = lfilter(b2, a2, lfilter(b1, a1, x))
    step = int(round(n_block * (1 - overlap)))
    starts = np.arange(0, x.size - n_block + 1, step)
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    z = (csum[starts + n_block] - csum[starts]) / n_block
    with np.errstate(divide="ignore"):
        lj = -0.691 + 10 * np.log10(z)
    z_abs = z[lj > -70.0]
    if z_abs.size == 0:
        raise UnmeasurableLoudnessError("signal is below the -70 LUFS absolute gate")
    gamma_r = -0.691 + 10 * np.log10(np.mean(z_abs)) - 10.0
    z_rel = z[(lj > -70.0) & (lj > gamma_r)]
    return float(-0.691 + 10 * np.log10(np.mean(z_rel)))


def lufs_error(pred: Waveform, target: Waveform) -> float:
    _check_lengths(pred, target)
    return abs(integrated_loudness(pred) - integrated_loudness(target))


# ---------------------------------------------------------------- level metrics


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def crest_factor_db(w) -> float:
    x = samples_of(w)
    r = _rms(x)
    if x.size == 0 or r == 0.0:
        raise MetricError("crest factor of a signal with zero RMS")
    return 20 * math.log10(float(np.max(np.abs(x))) / r)


def crest_factor_error(pred, target) -> float:
    _check_lengths(pred, target)
    return abs(crest_factor_db(pred) - crest_factor_db(target))


def rms_error(pred, target) -> float:
    _check_lengths(pred, target)
    rp, rt = _rms(samples_of(pred)), _rms(samples_of(target))
    if rp == 0.0 or rt == 0.0:
        raise MetricError("RMS error with a zero-RMS signal")
    return abs(20 * math.log10(rp / rt))


def _check_lengths(pred, target) -> None:
    if len(samples_of(pred)) != len(samples_of(target)):
        raise MetricError(f"length mismatch: {len(samples_of(pred))} vs {len(samples_of(target))}")


def spectrum_difference(pred, target, fft: int = 2048, hop: int = 512, floor: float = 1e-5) -> np.ndarray:
    """Time-averaged dB magnitude of pred minus that of target, one value per bin."""
    _check_lengths(pred, target)

    def avg_db(x):
        mag = np.abs(dsp.stft_frames(samples_of(x), fft, hop, "hann", "reflect"))
        return np.mean(20 * np.log10(np.maximum(mag, floor)), axis=0)

    return avg_db(pred) - avg_db(target)


def spectrum_difference_csv(diff: np.ndarray, sample_rate: int, fft: int) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["frequency_hz", "difference_db"])
    for k, d in enumerate(diff):
        wr.writerow([f"{k * sample_rate / fft:.3f}", f"{d:.6f}"])
    return buf.getvalue()


# ---------------------------------------------------------------- reports

METRIC_FIELDS = ("l1", "mrstft", "lufs_err", "cf_err", "rms_err", "transient_err")


@dataclass
class MetricReport:
    l1: float
    mrstft: float
    lufs_err: float | None
    cf_err: float | None
    rms_err: float | None
    transient_err: float | None
    metadata: dict = field(default_factory=dict)
    unmeasurable: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def evaluate_prediction(pred: Waveform, target: Waveform, tms: TMSConfig | None = None,
                        metadata: dict | None = None) -> MetricReport:
    """All six metrics; undefined ones are None and listed in ``unmeasurable``."""
    _check_lengths(pred, target)
    values: dict[str, float | None] = {
        "l1": float(l1_loss(pred.samples, target.samples)),
        "mrstft": float(mrstft_loss(pred.samples, target.samples)),
    }
    missing = []
    for name, fn in (
        ("lufs_err", lufs_error),
        ("cf_err", crest_factor_error),
        ("rms_err", rms_error),
        ("transient_err", lambda p, t: transient_metric(p, t, tms)),
    ):
        try:
            values[name] = float(fn(pred, target))
        except MetricError:
            values[name] = None
            missing.append(name)
    return MetricReport(**values, metadata=dict(metadata or {}), unmeasurable=missing)


def evaluate_clip(model, input: Waveform, target: Waveform, phi, metadata: dict | None = None,
                  tms: TMSConfig | None = None) -> MetricReport:
    """Run ``model`` over ``input`` and score the prediction against ``target``."""
    from .cells import process_sequence

    if len(input) != len(target):
        raise MetricError(f"length mismatch: input {len(input)} vs target {len(target)}")
    y, _ = process_sequence(model, input.samples, phi)
    meta = {"phi": np.asarray(phi, dtype=float).ravel().tolist(), **(metadata or {})}
    return evaluate_prediction(Waveform(np.asarray(y, dtype=np.float64), target.sample_rate), target, tms, meta)


# CSV headers, in the fixed order of the report columns
CSV_COLUMNS = ("l1", "stft", "lufs", "cf", "rms", "transient")


def mean_row(reports: list[MetricReport]) -> dict[str, float | None]:
    """Per-metric mean over the clips where it was measurable."""
    out: dict[str, float | None] = {}
    for f in METRIC_FIELDS:
        vals = [getattr(r, f) for r in reports if getattr(r, f) is not None]
        out[f] = float(np.mean(vals)) if vals else None
    return out


def reports_to_csv(reports: list[MetricReport], include_mean: bool = True) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["clip_id", *CSV_COLUMNS])

    def fmt(v):
        return "" if v is None else f"{v:.6g}"

    for r in reports:
        wr.writerow([r.metadata.get("clip_id", ""), *(fmt(getattr(r, f)) for f in METRIC_FIELDS)])
    if include_mean and reports:
        m = mean_row(reports)
        wr.writerow(["mean", *(fmt(m[f]) for f in METRIC_FIELDS)])
    return buf.getvalue()
