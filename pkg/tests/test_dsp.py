import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import get_window

from helpers import sine
from vacond import dsp
from vacond.dsp import DSPConfigError, SineConfig, SinusoidTrack, Waveform

FS = 48000


# ---------------------------------------------------------------- Waveform


def test_waveform_validates_and_is_read_only():
    with pytest.raises(DSPConfigError):
        Waveform(np.zeros(4), 0)
    with pytest.raises(DSPConfigError):
        Waveform(np.array([0.0, np.nan]), FS)
    src = np.zeros(4)
    w = Waveform(src, FS)
    src[0] = 1.0  # the waveform holds its own copy
    assert w.samples[0] == 0.0
    with pytest.raises(ValueError):
        w.samples[0] = 1.0


# ---------------------------------------------------------------- STFT


def test_stft_of_zero_is_zero():
    S = dsp.stft(Waveform(np.zeros(4096), FS), 512, 128)
    assert np.all(S.magnitude == 0)


def test_stft_frame_count_and_short_input():
    assert dsp.stft_frames(np.zeros(4096), 2048, 512, padding="none").shape == (5, 1025)
    assert dsp.num_frames(4096, 2048, 512, "none") == 5
    assert dsp.stft_frames(np.ones(100), 2048, 512, padding="none").shape == (1, 1025)
    assert dsp.stft_frames(np.zeros(4096), 512, 128).shape[0] == dsp.num_frames(4096, 512, 128)


@pytest.mark.parametrize("fft,hop", [(1000, 100), (512, 0), (512, 1024), (1, 1)])
def test_stft_rejects_invalid_sizes(fft, hop):
    with pytest.raises(DSPConfigError):
        dsp.stft(np.zeros(4096), fft, hop)


def test_stft_hann_peak_matches_window_dtft():
    N, f0 = 2048, 1000.0
    x = sine(f0, 0.5)
    frame = dsp.stft_frames(x, N, 512, padding="none")[3]
    k = int(np.argmax(np.abs(frame)))
    assert k == round(f0 * N / FS) == 43
    # direct DTFT of the window at the sine's offset from bin k
    n = np.arange(N)
    w = get_window("hann", N, fftbins=True)
    expected = 0.5 * abs(np.sum(w * np.exp(2j * np.pi * (f0 / FS - k / N) * n)))
    assert abs(np.abs(frame[k]) - expected) / expected < 0.01


def test_stft_parseval():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(2048)
    X = dsp.stft_frames(x, 2048, 2048, padding="none")[0]
    mag2 = np.abs(X) ** 2
    total = mag2[0] + mag2[-1] + 2 * np.sum(mag2[1:-1])
    windowed = x * get_window("hann", 2048, fftbins=True)
    assert abs(total / 2048 - np.sum(windowed**2)) / np.sum(windowed**2) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 10.0))
def test_stft_magnitude_is_linear_in_gain(a):
    x = np.random.default_rng(1).standard_normal(1024)
    m1 = np.abs(dsp.stft_frames(a * x, 256, 64))
    m0 = np.abs(dsp.stft_frames(x, 256, 64))
    assert np.allclose(m1, a * m0, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- DCT


def test_dct_constant_goes_to_dc():
    c = dsp.dct(np.full(64, 0.3))
    assert abs(c[0]) > 0 and np.allclose(c[1:], 0, atol=1e-12)


def test_dct_inverse_and_energy():
    x = np.random.default_rng(2).standard_normal(1024)
    c = dsp.dct(x)
    assert np.max(np.abs(dsp.idct(c) - x)) < 1e-9
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) / np.linalg.norm(x) < 1e-9


def test_dct_empty_rejected():
    with pytest.raises(DSPConfigError):
        dsp.dct([])
    with pytest.raises(DSPConfigError):
        dsp.idct([])


# ---------------------------------------------------------------- sinusoidal model


def test_analysis_of_silence_is_empty():
    assert dsp.sinusoidal_analysis(Waveform(np.zeros(FS), FS)) == []


def test_single_sine_gives_one_track():
    tracks = dsp.sinusoidal_analysis(Waveform(sine(440, amp=0.5), FS))
    assert len(tracks) == 1
    tr = tracks[0]
    assert len(tr) > 300
    assert abs(np.mean(tr.freqs) - 440) < 0.5
    assert abs(np.mean(tr.amps) - 0.5) / 0.5 < 0.05


def test_two_sines_give_two_tracks():
    x = sine(440, amp=0.5) + sine(2000, amp=0.25, phase=0.3)
    tracks = sorted(dsp.sinusoidal_analysis(Waveform(x, FS)), key=lambda t: np.mean(t.freqs))
    assert len(tracks) == 2
    for tr, (f, a) in zip(tracks, [(440, 0.5), (2000, 0.25)]):
        assert abs(np.mean(tr.freqs) - f) < 0.5
        assert abs(np.mean(tr.amps) - a) / a < 0.05


def _residual_ratio(x, edge=4000):
    y = dsp.sinusoidal_synthesis(dsp.sinusoidal_analysis(Waveform(x, FS)), x.size, FS)
    e = slice(edge, -edge)
    return np.sum((x - y)[e] ** 2) / np.sum(x[e] ** 2)


def test_round_trip_residuals():
    assert _residual_ratio(sine(440, amp=0.5)) < 0.01
    assert _residual_ratio(sine(440, amp=0.5) + sine(2000, amp=0.25, phase=0.3)) < 0.02


def test_synthesis_edge_cases():
    assert np.array_equal(dsp.sinusoidal_synthesis([], 100, FS), np.zeros(100))
    bad = SinusoidTrack(birth=0, hop=128, freqs=np.array([30000.0]), amps=np.array([1.0]), phases=np.array([0.0]))
    with pytest.raises(DSPConfigError):
        dsp.sinusoidal_synthesis([bad], 1000, FS)


def test_analysis_shift_covariance():
    # onset after leading silence: frame 0 is centred on sample 0 and cannot move earlier
    tone = sine(440, amp=0.5) + sine(2000, amp=0.25, phase=0.3)
    x = np.concatenate([np.zeros(4096), tone])
    cfg = SineConfig()
    births = sorted(t.birth for t in dsp.sinusoidal_analysis(Waveform(x, FS), cfg))
    delayed = np.concatenate([np.zeros(cfg.hop), x])
    births_d = sorted(t.birth for t in dsp.sinusoidal_analysis(Waveform(delayed, FS), cfg))
    assert births[0] > 0
    assert births_d == [b + 1 for b in births]


def test_sines_plus_residual_reconstruct_exactly():
    rng = np.random.default_rng(3)
    x = sine(440, amp=0.5) + 0.05 * rng.standard_normal(FS)
    y = dsp.sinusoidal_synthesis(dsp.sinusoidal_analysis(Waveform(x, FS)), x.size, FS)
    residual = x - y
    assert np.max(np.abs((y + residual) - x)) <= 1e-12


def test_max_tracks_is_respected():
    x = sum(sine(f, amp=0.1) for f in (300, 700, 1100, 1500, 1900))
    tracks = dsp.sinusoidal_analysis(Waveform(x, FS), SineConfig(max_tracks=3))
    frames = max(t.death for t in tracks)
    for i in range(frames):
        assert sum(t.birth <= i < t.death for t in tracks) <= 3
