import numpy as np
import pytest
import scipy.signal as ss
from hypothesis import given, strategies as st

from neurodec import dsp

FS = 512.0


def direct_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def rms_ratio(y, x, trim):
    return np.sqrt(np.mean(y[trim:-trim] ** 2) / np.mean(x[trim:-trim] ** 2))


# -- FFT ----------------------------------------------------------------------

def test_fft_impulse_and_constant():
    assert np.allclose(dsp.fft_real([1, 0, 0, 0], 4), [1, 1, 1])
    assert np.allclose(dsp.fft_real([1, 1, 1, 1], 4), [4, 0, 0])


def test_fft_matches_direct_dft(rng):
    x = rng.standard_normal(256)
    ref = direct_dft(x)[:129]
    assert np.max(np.abs(dsp.fft_real(x, 256) - ref)) <= 1e-6 * np.max(np.abs(ref))


def test_fft_rejects_non_pow2():
    with pytest.raises(ValueError):
        dsp.fft_real(np.ones(6), 6)


def test_fft_zero_pads(rng):
    x = rng.standard_normal(100)
    assert np.allclose(dsp.fft_real(x, 128), np.fft.rfft(x, 128))


def test_dft_any_length_matches_direct(rng):
    for n in (7, 100, 243):
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        assert np.allclose(dsp.dft(x), direct_dft(x), atol=1e-9 * n)
        assert np.allclose(dsp.idft(dsp.dft(x)), x, atol=1e-10)


@given(st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_fft_inverse_and_parseval(log_n, seed):
    n = 2**log_n
    x = np.random.default_rng(seed).standard_normal(n)
    X = dsp.fft_real(x, n)
    assert np.allclose(dsp.ifft_real(X, n), x, rtol=1e-6, atol=1e-9)
    if n >= 2:
        p = np.abs(X) ** 2
        energy = (p[0] + 2 * p[1:-1].sum() + p[-1]) / n
        assert energy == pytest.approx(np.sum(x * x), rel=1e-6)


# -- STFT ---------------------------------------------------------------------

def test_stft_frame_count_and_tone():
    fs = 22050
    t = np.arange(fs) / fs
    S = dsp.stft(np.sin(2 * np.pi * 1000 * t), 1024, 220)
    assert len(S) == 101 == 1 + 22050 // 220
    assert np.all(np.argmax(np.abs(S[3:-3]), axis=1) == 46)


def test_stft_matches_scipy_framing(rng):
    x = rng.standard_normal(5000)
    S = dsp.stft(x, 512, 128)
    win = ss.get_window("hann", 512)
    xp = np.pad(x, 256, mode="reflect")
    for k in (0, 7, len(S) - 1):
        ref = np.fft.rfft(xp[k * 128:k * 128 + 512] * win)
        assert np.allclose(S[k], ref, atol=1e-9)


def test_stft_zero_and_errors():
    assert not np.abs(dsp.stft(np.zeros(3000), 1024, 256)).any()
    with pytest.raises(ValueError):
        dsp.stft(np.ones(100), 1024, 0)
    with pytest.raises(ValueError):
        dsp.stft(np.array([]), 1024, 256)


@given(st.integers(2000, 8000), st.integers(0, 2**32 - 1))
def test_istft_roundtrip(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    y = dsp.istft(dsp.stft(x, 1024, 256), 256, 1024, length=n)
    assert np.linalg.norm(y - x) <= 1e-4 * np.linalg.norm(x)


# -- mel ----------------------------------------------------------------------

def slaney_mel(f):
    f = np.asarray(f, dtype=float)
    lin = f / (200.0 / 3)
    log = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f < 1000.0, lin, log)


def slaney_hz(m):
    m = np.asarray(m, dtype=float)
    return np.where(m < 15.0, m * 200.0 / 3, 1000.0 * np.exp((m - 15.0) * np.log(6.4) / 27.0))


def triangle_weight(band, freq, n_mels=80, fmin=0.0, fmax=8000.0):
    edges = slaney_hz(np.linspace(slaney_mel(fmin), slaney_mel(fmax), n_mels + 2))
    lo, c, hi = edges[band], edges[band + 1], edges[band + 2]
    if freq <= lo or freq >= hi:
        up = 0.0
    elif freq <= c:
        up = (freq - lo) / (c - lo)
    else:
        up = (hi - freq) / (hi - c)
    return up * 2.0 / (hi - lo)


def test_mel_filterbank_shape_and_spots():
    fb = dsp.mel_filterbank()
    assert fb.weights.shape == (80, 513)
    freqs = np.arange(513) * 22050 / 1024
    spots = [(0, 2), (1, 3), (5, 9), (20, 30), (31, 45), (40, 70), (55, 140), (63, 200),
             (70, 260), (79, 365)]
    for band, b in spots:
        assert fb.weights[band, b] == pytest.approx(triangle_weight(band, freqs[b]), abs=1e-6)
    assert any(triangle_weight(b, freqs[k]) > 0 for b, k in spots)


def test_mel_rows_unimodal_and_ordered():
    w = dsp.mel_filterbank().weights
    assert (w >= 0).all()
    peaks = []
    for row in w:
        nz = row[row > 0]
        k = int(np.argmax(nz))
        assert np.all(np.diff(nz[:k + 1]) >= 0) and np.all(np.diff(nz[k:]) <= 0)
        peaks.append(np.argmax(row))
    assert np.all(np.diff(peaks) >= 0)


def test_mel_scale_helpers():
    f = np.array([0.0, 500.0, 1000.0, 3000.0, 8000.0])
    assert np.allclose(dsp.hz_to_mel(f), slaney_mel(f))
    assert np.allclose(dsp.mel_to_hz(dsp.hz_to_mel(f)), f)


def test_mel_errors():
    with pytest.raises(ValueError):
        dsp.mel_filterbank(fmax=12000)
    with pytest.raises(ValueError):
        dsp.mel_filterbank(n_mels=0)


# -- filters ------------------------------------------------------------------

def test_bandpass_matches_scipy_design():
    f = dsp.butter_bandpass(1.0, 120.0, 4, FS)
    ref = ss.butter(4, [1.0, 120.0], btype="bandpass", fs=FS, output="sos")
    freqs = np.array([0.1, 0.5, 1, 5, 60, 120, 200, 250])
    _, h = ss.sosfreqz(ref, worN=freqs, fs=FS)
    assert np.allclose(np.abs(f.response(freqs)), np.abs(h), rtol=1e-6, atol=1e-9)


def test_bandpass_gain_spec():
    f = dsp.butter_bandpass(1.0, 120.0, 4, FS)
    assert 20 * np.log10(abs(f.response([0.1])[0])) <= -40
    t = np.arange(int(10 * FS)) / FS
    x = np.sin(2 * np.pi * 60 * t)
    assert rms_ratio(dsp.filtfilt(f, x), x, 512) == pytest.approx(1.0, abs=0.02)


def test_bandpass_removes_dc():
    f = dsp.butter_bandpass(1.0, 120.0, 4, FS)
    y = dsp.filtfilt(f, np.ones(int(10 * FS)))
    assert abs(y.mean()) < 1e-3


def test_filtfilt_matches_scipy(rng):
    f = dsp.butter_bandpass(1.0, 120.0, 4, FS)
    x = rng.standard_normal(3000)
    ref = ss.sosfiltfilt(f.sos, x, padlen=3 * f.order)
    assert np.allclose(dsp.filtfilt(f, x), ref, atol=1e-9)
    short = rng.standard_normal(20)
    ref = ss.sosfiltfilt(f.sos, short, padlen=19)
    assert np.allclose(dsp.filtfilt(f, short), ref, atol=1e-9)


def test_sosfilt_matches_scipy(rng):
    f = dsp.notch(50.0, 30.0, FS).then(dsp.butter_bandpass(1, 120, 4, FS))
    x = rng.standard_normal(1000)
    assert np.allclose(dsp.sosfilt(f, x), ss.sosfilt(f.sos, x), atol=1e-10)
    assert np.allclose(dsp.sosfilt_zi(f), ss.sosfilt_zi(f.sos), atol=1e-10)


def test_filtfilt_zero_phase():
    f = dsp.butter_bandpass(1.0, 120.0, 4, FS)
    t = np.arange(4096) / FS
    x = np.sin(2 * np.pi * 37 * t)
    y = dsp.filtfilt(f, x)
    mid = slice(1024, 3072)
    lags = np.arange(-20, 21)
    xc = [np.dot(x[mid], np.roll(y, -k)[mid]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_notch_matches_iirnotch():
    f = dsp.notch(50.0, 30.0, FS)
    b, a = ss.iirnotch(50.0, 30.0, fs=FS)
    assert np.allclose(f.sos[0], np.concatenate([b, a]) / a[0], atol=1e-12)
    g = np.abs(f.response([0.0, 50.0, FS / 2]))
    assert g[1] < 1e-6 and g[0] == pytest.approx(1, abs=1e-9) and g[2] == pytest.approx(1, abs=1e-9)


def test_notch_attenuation_and_passband():
    f = dsp.notch(50.0, 30.0, FS)
    t = np.arange(int(10 * FS)) / FS
    x50 = np.sin(2 * np.pi * 50 * t)
    assert 20 * np.log10(rms_ratio(dsp.filtfilt(f, x50), x50, 1024)) <= -30
    x30 = np.sin(2 * np.pi * 30 * t)
    assert rms_ratio(dsp.filtfilt(f, x30), x30, 1024) == pytest.approx(1.0, abs=0.05)
    assert not dsp.filtfilt(f, np.zeros(500)).any()
    with pytest.raises(ValueError):
        dsp.notch(256.0, 30.0, FS)


def test_line_noise_notches_harmonics():
    f = dsp.line_noise_notches(FS)
    assert len(f.sections) == 5
    g = np.abs(f.response([50, 100, 150, 200, 250]))
    assert np.all(g < 1e-6)


def test_unstable_cascade_rejected():
    with pytest.raises(ValueError):
        dsp.BiquadCascade(np.array([[1.0, 0, 0, -2.0, 1.0]]), FS)
    with pytest.raises(ValueError):
        dsp.butter_bandpass(1.0, 300.0, 4, FS)


# -- Hilbert, detrend, resample -------------------------------------------------

def test_hilbert_cosine():
    t = np.arange(int(2 * FS)) / FS
    a = dsp.hilbert_analytic(np.cos(2 * np.pi * 8 * t))
    inner = slice(len(t) // 10, len(t) - len(t) // 10)
    assert np.allclose(np.abs(a[inner]), 1.0, atol=0.01)
    assert np.allclose(a.imag[inner], np.sin(2 * np.pi * 8 * t)[inner], atol=0.01)
    assert np.allclose(a.real, np.cos(2 * np.pi * 8 * t), atol=1e-6)
    a3 = dsp.hilbert_analytic(3.0 * np.cos(2 * np.pi * 8 * t))
    assert np.allclose(np.abs(a3), 3 * np.abs(a), rtol=1e-9)


def test_hilbert_matches_scipy_any_length(rng):
    for n in (2, 101, 1000, 1024):
        x = rng.standard_normal(n)
        assert np.allclose(dsp.hilbert_analytic(x), ss.hilbert(x), atol=1e-9)
    with pytest.raises(ValueError):
        dsp.hilbert_analytic(np.array([]))


def test_detrend(rng):
    t = np.arange(100.0)
    assert np.allclose(dsp.detrend_linear(3 + 2 * t), 0, atol=1e-6)
    x = rng.standard_normal(257)
    y = dsp.detrend_linear(x)
    assert abs(y.sum()) < 1e-6 and abs(y @ np.arange(257)) < 1e-6
    A = np.column_stack([np.ones(257), np.arange(257)])
    coef = np.linalg.solve(A.T @ A, A.T @ x)
    assert np.allclose(y, x - A @ coef, atol=1e-9)
    assert np.allclose(y, ss.detrend(x, type="linear"), atol=1e-9)


def test_resample_dc_length_and_tone():
    y = dsp.resample(np.ones(44100), 44100, 22050)
    assert len(y) == 22050
    assert np.allclose(y[100:-100], 1.0, atol=1e-3)
    t = np.arange(44100) / 44100
    y = dsp.resample(np.sin(2 * np.pi * 440 * t), 44100, 22050)
    spec = np.abs(np.fft.rfft(y))
    freq = np.argmax(spec) * 22050 / len(y)
    assert abs(freq - 440) <= 22050 / len(y)
    assert len(dsp.resample(np.ones(1000), 16000, 22050)) == round(1000 * 22050 / 16000)
    with pytest.raises(ValueError):
        dsp.resample(np.ones(10), 0, 22050)
