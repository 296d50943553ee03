import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurodec import dsp, melfront, vocoder
from neurodec.io import read_wav

FS = melfront.AUDIO_FS


def _tone(f=440.0, dur=1.0):
    t = np.arange(int(dur * FS)) / FS
    return np.sin(2 * np.pi * f * t)


def test_mel_to_linear_tone_peak():
    mel = melfront.mel_spectrogram(_tone(1000.0), FS, log_compressed=True)
    mag = vocoder.mel_to_linear(mel)
    assert mag.shape == (mel.n_frames, 513)
    peaks = np.argmax(mag[5:-5], axis=1)
    assert np.all(np.abs(peaks - round(1000 * 1024 / FS)) <= 2)


def test_mel_to_linear_zero():
    mel = melfront.MelSpectrogram(np.zeros((4, 80)), np.arange(4) * 0.01,
                                  melfront.default_params(log_compressed=False))
    assert not vocoder.mel_to_linear(mel).any()


def test_pinv_roundtrip_bound():
    # mel is lossy: 513 bins squeezed into 80. Measured ~0.65 on uniform random spectra.
    fb = melfront.filterbank().weights
    P = np.linalg.pinv(fb)
    for seed in range(3):
        S = np.random.default_rng(seed).random((50, 513))
        err = np.linalg.norm(S @ fb.T @ P.T - S) / np.linalg.norm(S)
        assert err < 0.7


@given(st.integers(0, 2**31 - 1))
def test_pinv_exact_on_row_space(seed):
    # spectra that are combinations of the filters themselves survive the round trip
    fb = melfront.filterbank().weights
    S = np.random.default_rng(seed).random((5, 80)) @ fb
    back = S @ fb.T @ np.linalg.pinv(fb).T
    assert np.allclose(back, S, rtol=1e-8, atol=1e-12 * np.abs(S).max())


def test_mel_param_mismatch():
    mel = melfront.MelSpectrogram(np.zeros((3, 40)), np.arange(3) * 0.01, melfront.default_params())
    with pytest.raises(ValueError):
        vocoder.mel_to_linear(mel)


def test_griffin_lim_sinusoid_converges():
    x = _tone()
    mag = np.abs(dsp.stft(x, 1024, 220))
    y = vocoder.griffin_lim(mag, n_iter=100, seed=0, length=len(x))
    assert vocoder.spectral_convergence(y, mag, 220, 1024) < 0.1
    assert len(y) == len(x)


def test_griffin_lim_monotone_without_momentum():
    x = _tone(700.0, 0.5)
    mag = np.abs(dsp.stft(x, 1024, 220))
    errors = []
    vocoder.griffin_lim(mag, n_iter=30, momentum=0.0, seed=1, length=len(x), errors=errors)
    assert len(errors) == 30
    assert np.all(np.diff(errors) <= 1e-9)


def test_griffin_lim_zero_and_errors():
    y = vocoder.griffin_lim(np.zeros((20, 513)), n_iter=3)
    assert not y.any() and len(y) == 19 * 220
    with pytest.raises(ValueError):
        vocoder.griffin_lim(np.zeros((5, 513)), n_iter=0)
    with pytest.raises(ValueError):
        vocoder.griffin_lim(-np.ones((5, 513)))


def test_mel_to_audio_properties():
    rng = np.random.default_rng(0)
    mel = melfront.mel_spectrogram(0.3 * rng.standard_normal(FS // 2), FS)
    a = vocoder.mel_to_audio(mel, seed=4)
    b = vocoder.mel_to_audio(mel, seed=4)
    assert np.array_equal(a, b)
    assert np.isfinite(a).all() and np.abs(a).max() == pytest.approx(0.9)
    assert abs(len(a) - mel.n_frames * 220) <= 220


def test_synthesize_writes_wav(tmp_path):
    from neurodec import decoders as dec
    from neurodec.melfront import PairedDataset
    rng = np.random.default_rng(0)
    d = PairedDataset(rng.standard_normal((300, 4)), rng.standard_normal((300, 80)) - 5,
                      np.zeros(300, np.int64), meta={"mel_params": melfront.default_params()})
    splits = dec.split_dataset(d)
    ckpt, _ = dec.train(None, splits, dec.TrainConfig.for_model("fcdnn", max_epochs=1))
    y = vocoder.synthesize(ckpt, splits[2].X, tmp_path / "o.wav", seed=7)
    back, fs = read_wav(tmp_path / "o.wav")
    assert fs == FS and np.abs(back).max() <= 0.9 + 1e-6
    assert np.array_equal(back, y.astype(np.float32))
    assert abs(len(y) / FS - len(splits[2]) * 220 / FS) <= 220 / FS
