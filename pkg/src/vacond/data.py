"""WAV I/O, knob normalization, synthetic reference devices and dataset manifests."""

from __future__ import annotations

import itertools
import json
import math
import warnings
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.io.wavfile
from scipy.signal import lfilter

from .dsp import Waveform

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class WavError(ValueError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------- WAV


def read_wav(path) -> Waveform:
    """Mono PCM 8/16/24/32-bit or float WAV, scaled to [-1, 1)."""
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", scipy.io.wavfile.WavFileWarning)
            sr, data = scipy.io.wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError / struct errors for bad files
        raise WavError(f"{path}: cannot read WAV data ({exc})") from exc
    for w in caught:
        if "prematurely" in str(w.message):
            raise WavError(f"{path}: truncated file ({w.message})")
    if data.ndim != 1:
        raise WavError(f"{path}: expected a mono file, found {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        # 24-bit files come back left-aligned in int32
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise WavError(f"{path}: unsupported sample type {data.dtype}")
    return Waveform(x, sr)


def write_wav(w: Waveform, path, bit_depth: int = 32) -> None:
    """bit_depth 16 or 24 writes PCM; 32 writes IEEE float."""
    x = np.asarray(w.samples, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bit_depth == 32:
        scipy.io.wavfile.write(str(path), w.sample_rate, x.astype(np.float32))
    elif bit_depth == 16:
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        scipy.io.wavfile.write(str(path), w.sample_rate, q)
    elif bit_depth == 24:
        q = np.clip(np.round(x * 8388608.0), -8388608, 8388607).astype("<i4")
        raw = q.view(np.uint8).reshape(-1, 4)[:, :3].tobytes()
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(3)
            fh.setframerate(w.sample_rate)
            fh.writeframes(raw)
    else:
        raise WavError(f"unsupported bit depth {bit_depth}; use 16, 24 or 32")


# ---------------------------------------------------------------- knobs


def normalize_knobs(raw, ranges) -> np.ndarray:
    """Affine map of each value from its [lo, hi] range onto [-1, 1]."""
    raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
    if len(ranges) != raw.size:
        raise ValueError(f"{raw.size} knob values but {len(ranges)} ranges")
    out = np.empty(raw.size)
    for i, (v, (lo, hi)) in enumerate(zip(raw, ranges)):
        if not hi > lo:
            raise ValueError(f"knob {i}: empty range [{lo}, {hi}]")
        if not lo <= v <= hi:
            raise ValueError(f"knob {i} value {v} outside its range [{lo}, {hi}]")
        out[i] = 2.0 * (v - lo) / (hi - lo) - 1.0
    return out


# ---------------------------------------------------------------- synthetic devices


@dataclass
class OverdriveSpec:
    """tanh waveshaper with a knob-controlled pre-gain and a low-pass/flat tone blend."""

    sample_rate: int = 48000
    max_gain: float = 20.0
    tone_cutoff_hz: float = 1000.0
    knob_max: int = 4

    knob_names = ("gain", "tone")

    def ranges(self):
        return [(0.0, float(self.knob_max))] * 2

    def pre_gain(self, gain_knob: float) -> float:
        return self.max_gain ** (gain_knob / self.knob_max)


@dataclass
class CompressorSpec:
    """Feed-forward RMS compressor with a soft-knee gain computer."""

    sample_rate: int = 48000
    threshold_db_per_knob: float = -0.3
    ratio_per_knob: float = 0.09
    knee_db: float = 6.0
    attack_ms: float = 10.0
    release_ms: float = 300.0
    detector_ms: float = 10.0
    # knob-independent so that output level stays non-increasing in the knob
    makeup_db: float = 0.0
    knob_max: int = 100

    knob_names = ("peak_reduction",)

    def ranges(self):
        return [(0.0, float(self.knob_max))]

    def threshold_db(self, knob: float) -> float:
        return self.threshold_db_per_knob * knob

    def ratio(self, knob: float) -> float:
        return 1.0 + self.ratio_per_knob * knob


def _check_knob(v, hi, name, integer=False):
    if not 0 <= v <= hi:
        raise ValueError(f"{name} knob {v} outside [0, {hi}]")
    if integer and float(v) != int(v):
        raise ValueError(f"{name} knob must be an integer step, got {v}")


def _one_pole_coeff(ms: float, sample_rate: int) -> float:
    return 1.0 - math.exp(-1.0 / (ms * 1e-3 * sample_rate))


def synth_overdrive(x: Waveform, gain_knob: float, tone_knob: float, spec: OverdriveSpec | None = None) -> Waveform:
    spec = spec or OverdriveSpec(sample_rate=x.sample_rate)
    _check_knob(gain_knob, spec.knob_max, "gain", integer=True)
    _check_knob(tone_knob, spec.knob_max, "tone", integer=True)
    u = np.tanh(spec.pre_gain(gain_knob) * x.samples)
    a = 1.0 - math.exp(-2 * math.pi * spec.tone_cutoff_hz / x.sample_rate)
    lp = lfilter([a], [1.0, a - 1.0], u)
    t = tone_knob / spec.knob_max
    return Waveform((1.0 - t) * lp + t * u, x.sample_rate)


def gain_computer_db(level_db, threshold_db: float, ratio: float, knee_db: float):
    """Static soft-knee curve: output level for an input level (both dB)."""
    L = np.asarray(level_db, dtype=np.float64)
    over = L - threshold_db
    out = np.where(2 * over < -knee_db, L, threshold_db + over / ratio)
    if knee_db > 0:
        knee = np.abs(2 * over) <= knee_db
        out = np.where(knee, L + (1.0 / ratio - 1.0) * (over + knee_db / 2) ** 2 / (2 * knee_db), out)
    return out


@numba.njit(cache=True)
def _smooth_gain(gr: np.ndarray, a_att: float, a_rel: float) -> np.ndarray:
    out = np.empty_like(gr)
    g = 0.0
    for n, v in enumerate(gr):
        g += (a_att if v > g else a_rel) * (v - g)
        out[n] = g
    return out


def synth_compressor(x: Waveform, peak_reduction: float, spec: CompressorSpec | None = None) -> Waveform:
    spec = spec or CompressorSpec(sample_rate=x.sample_rate)
    _check_knob(peak_reduction, spec.knob_max, "peak reduction")
    fs = x.sample_rate
    s = x.samples
    if peak_reduction == 0:
        return Waveform(s.copy(), fs)
    a = _one_pole_coeff(spec.detector_ms, fs)
    power = lfilter([a], [1.0, a - 1.0], s * s)
    level = 10 * np.log10(np.maximum(power, 1e-12))
    T, R = spec.threshold_db(peak_reduction), spec.ratio(peak_reduction)
    gr = level - gain_computer_db(level, T, R, spec.knee_db)
    gr = _smooth_gain(gr, _one_pole_coeff(spec.attack_ms, fs), _one_pole_coeff(spec.release_ms, fs))
    return Waveform(s * 10 ** ((spec.makeup_db - gr) / 20), fs)


# ---------------------------------------------------------------- synthetic sources


def make_sources(sample_rate: int = 48000, seconds: float = 6.0, seed: int = 0) -> dict[str, Waveform]:
    """White noise plus guitar-, bass- and drum-like test material."""
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate

    noise = 0.25 * rng.standard_normal(n)

    guitar = np.zeros(n)
    pos = 0
    while pos < n:
        # Karplus-Strong pluck
        f0 = rng.choice([82.4, 110.0, 146.8, 196.0, 246.9, 329.6]) * rng.choice([1, 2])
        period = max(2, int(round(sample_rate / f0)))
        length = min(n - pos, int(sample_rate * rng.uniform(0.25, 0.6)))
        buf = rng.uniform(-1, 1, period)
        out = np.empty(length)
        for i in range(length):
            out[i] = buf[i % period]
            buf[i % period] = 0.996 * 0.5 * (buf[i % period] + buf[(i + 1) % period])
        guitar[pos : pos + length] += 0.5 * out
        pos += length

    bass = np.zeros(n)
    step = int(0.25 * sample_rate)
    for start in range(0, n, step):
        f0 = rng.choice([41.2, 55.0, 61.7, 73.4, 82.4])
        seg = t[: min(step, n - start)]
        bass[start : start + seg.size] = 0.6 * np.exp(-seg * 4) * np.sin(2 * np.pi * f0 * seg + 0.3 * np.sin(2 * np.pi * 2 * f0 * seg))

    drums = np.zeros(n)
    beat = int(0.125 * sample_rate)
    for k, start in enumerate(range(0, n, beat)):
        seg = t[: min(beat, n - start)]
        if k % 4 == 0:  # kick
            drums[start : start + seg.size] += 0.8 * np.exp(-seg * 30) * np.sin(2 * np.pi * (50 + 100 * np.exp(-seg * 40)) * seg)
        if k % 4 == 2:  # snare
            drums[start : start + seg.size] += 0.4 * np.exp(-seg * 25) * rng.standard_normal(seg.size)
        drums[start : start + seg.size] += 0.15 * np.exp(-seg * 30) * rng.standard_normal(seg.size)  # hat
    # room noise keeps every stretch of the loop audible
    drums += 0.02 * rng.standard_normal(n)

    return {
        name: Waveform(np.clip(sig, -1.0, 1.0), sample_rate)
        for name, sig in (("noise", noise), ("guitar", guitar), ("bass", bass), ("drums", drums))
    }


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    input: str
    target: str
    knobs: list[float]
    phi: list[float]
    split: str
    offset: int = 0


@dataclass
class DatasetManifest:
    device: str
    cond_dim: int
    sample_rate: int
    knob_names: list[str]
    knob_ranges: list[list[float]]
    entries: list[ManifestEntry] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    root: Path | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("root")
        return json.dumps(d, indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest; paths inside it are relative to its folder."""
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(f"{path}: unsupported schema_version {d.get('schema_version')!r}")
    try:
        entries = [ManifestEntry(**e) for e in d.pop("entries")]
        m = DatasetManifest(**d, entries=entries, root=path.parent)
    except TypeError as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    validate_manifest(m, check_files)
    return m


def validate_manifest(m: DatasetManifest, check_files: bool = True) -> None:
    if m.cond_dim != len(m.knob_ranges) or m.cond_dim != len(m.knob_names):
        raise ManifestError("cond_dim does not match the knob declarations")
    ids = set()
    for e in m.entries:
        if e.id in ids:
            raise ManifestError(f"duplicate entry id {e.id!r}")
        ids.add(e.id)
        if e.split not in SPLITS:
            raise ManifestError(f"entry {e.id}: split must be one of {SPLITS}, got {e.split!r}")
        phi = np.asarray(e.phi, dtype=np.float64)
        if phi.size != m.cond_dim or np.any(np.abs(phi) > 1.0):
            raise ManifestError(f"entry {e.id}: phi must have {m.cond_dim} values in [-1, 1]")
        try:
            expected = normalize_knobs(e.knobs, m.knob_ranges)
        except ValueError as exc:
            raise ManifestError(f"entry {e.id}: {exc}") from exc
        if not np.allclose(phi, expected, atol=1e-9):
            raise ManifestError(f"entry {e.id}: phi {e.phi} inconsistent with knobs {e.knobs}")
        if check_files:
            lengths = []
            for rel in (e.input, e.target):
                p = m.resolve(rel)
                if not p.exists():
                    raise ManifestError(f"entry {e.id}: missing file {p}")
                w = read_wav(p)
                if w.sample_rate != m.sample_rate:
                    raise ManifestError(f"entry {e.id}: {p} has rate {w.sample_rate}, manifest says {m.sample_rate}")
                lengths.append(len(w) - (e.offset if rel == e.target else 0))
            if abs(lengths[0] - lengths[1]) > 1:
                raise ManifestError(f"entry {e.id}: input/target lengths differ by {abs(lengths[0] - lengths[1])} samples")


def load_pairs(m: DatasetManifest, split: str):
    """[(id, input samples, target samples, phi)] for one split, trimmed to equal length."""
    out = []
    for e in m.split(split):
        x = read_wav(m.resolve(e.input)).samples
        y = read_wav(m.resolve(e.target)).samples[e.offset :]
        n = min(x.size, y.size)
        out.append((e.id, x[:n], y[:n], np.asarray(e.phi, dtype=np.float64)))
    return out


def _split_assign(keys: list[tuple], ratios, rng) -> list[str]:
    """Random split with exact counts; every distinct key gets at least one train entry."""
    n = len(keys)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    distinct = sorted(set(keys))
    if n_train < len(distinct):
        raise ValueError(f"{n_train} training entries cannot cover {len(distinct)} knob settings")
    order = rng.permutation(n)
    labels = [None] * n
    seen = set()
    for i in order:
        if keys[i] not in seen:
            seen.add(keys[i])
            labels[i] = "train"
    rest = [i for i in order if labels[i] is None]
    quota = [("train", n_train - len(seen)), ("val", n_val), ("test", n - n_train - n_val)]
    pos = 0
    for name, count in quota:
        for i in rest[pos : pos + count]:
            labels[i] = name
        pos += count
    return labels


def build_synthetic_dataset(out_dir, device: str, sources: dict[str, Waveform], knob_grid=None,
                            split=(0.8, 0.15, 0.05), seed: int = 0, spec=None) -> DatasetManifest:
    """Render every (source, knob setting) pair and write WAVs plus ``manifest.json``."""
    if not sources:
        raise ValueError("no source signals")
    if abs(sum(split) - 1.0) > 1e-9 or any(r < 0 for r in split):
        raise ValueError(f"split ratios must be >= 0 and sum to 1, got {split}")
    rates = {w.sample_rate for w in sources.values()}
    if len(rates) != 1:
        raise ValueError(f"sources disagree on sample rate: {sorted(rates)}")
    sr = rates.pop()
    if device == "overdrive":
        spec = spec or OverdriveSpec(sample_rate=sr)
        knob_grid = knob_grid or [list(range(5)), list(range(5))]
        render = lambda w, k: synth_overdrive(w, k[0], k[1], spec)  # noqa: E731
    elif device == "compressor":
        spec = spec or CompressorSpec(sample_rate=sr)
        knob_grid = knob_grid or [list(range(0, 101, 10))]
        render = lambda w, k: synth_compressor(w, k[0], spec)  # noqa: E731
    else:
        raise ValueError(f"unknown device {device!r}; choose overdrive or compressor")
    if len(knob_grid) != len(spec.knob_names) or any(len(axis) == 0 for axis in knob_grid):
        raise ValueError(f"{device} needs a non-empty grid for each of {spec.knob_names}")
    out = Path(out_dir)
    ranges = spec.ranges()
    settings = list(itertools.product(*knob_grid))
    names = sorted(sources)
    for name in names:
        write_wav(sources[name], out / "inputs" / f"{name}.wav")
    entries = []
    keys = []
    for knobs in settings:
        tag = "_".join(f"{k:g}" for k in knobs)
        for name in names:
            rel = f"targets/{device}_{tag}_{name}.wav"
            write_wav(render(sources[name], knobs), out / rel)
            entries.append(ManifestEntry(
                id=f"{device}_{tag}_{name}", input=f"inputs/{name}.wav", target=rel,
                knobs=[float(k) for k in knobs], phi=normalize_knobs(knobs, ranges).tolist(), split="",
            ))
            keys.append(tuple(knobs))
    for e, label in zip(entries, _split_assign(keys, split, np.random.default_rng(seed))):
        e.split = label
    m = DatasetManifest(device, len(ranges), sr, list(spec.knob_names), [list(r) for r in ranges], entries, root=out)
    m.save(out / "manifest.json")
    return m


def manifest_dataset(m: DatasetManifest):
    """Load a manifest into a :class:`training.SequenceDataset`."""
    from .training import Clip, SequenceDataset

    splits = {s: [Clip(x, y, phi, cid) for cid, x, y, phi in load_pairs(m, s)] for s in SPLITS}
    return SequenceDataset(splits["train"], splits["val"], splits["test"], m.sample_rate, m.cond_dim)

