"""Synthetic stimulus/iEEG pairs with a planted linear map from mel frames to envelopes.

Audio is a random-phase multitone: sinusoids on every third FFT bin of the mel
front-end (so Hann main lobes never overlap and the STFT magnitude is steady),
grouped into bands whose amplitudes follow smooth log-normal envelopes. The
true log-mel trajectory of that audio, mixed by ``mixing`` and delayed by the
stimulus-to-response lag, becomes the amplitude of an in-band carrier on each
neural channel.

Carriers sit at 20/40/60/80 Hz. Every pairwise difference is a multiple of
20 Hz, so the cross-channel terms that common average referencing leaks into
each channel average out over a 50 ms window, and same-frequency leakage is a
fixed linear combination that the decoder can absorb.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import dsp, melfront
from .io import AnnotationTrack, ChannelMeta, Event, Recording

EEG_FS = 512.0
CARRIERS_HZ = (20.0, 40.0, 60.0, 80.0)
TONE_SPACING_BINS = 3
ENVELOPE_SMOOTH_S = 0.15
NOISE_SMOOTH_S = 0.03
DEPTH = 0.25
AMPLITUDE_UV = 50.0


@dataclass
class SynthData:
    recording: Recording
    audio: np.ndarray
    audio_fs: float
    track: AnnotationTrack
    mel: melfront.MelSpectrogram  # mel of the whole stimulus
    mixing: np.ndarray


def _smooth_noise(rng, n: int, sigma_frames: float) -> np.ndarray:
    """Unit-variance Gaussian noise smoothed by a Gaussian kernel along axis 0."""
    half = int(math.ceil(4 * sigma_frames))
    w = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma_frames) ** 2)
    w /= w.sum()
    white = rng.standard_normal(n + 2 * half)
    out = np.convolve(white, w, mode="valid")
    return (out - out.mean()) / out.std()


def stimulus(duration_s: float, rng, n_sources: int = 12, fs: int = melfront.AUDIO_FS,
             log_spread: float = 0.8) -> np.ndarray:
    """Multitone audio with ``n_sources`` independently modulated bands up to ~7.8 kHz."""
    n = int(round(duration_s * fs))
    n_fft = melfront.N_FFT
    bins = np.arange(TONE_SPACING_BINS, int(7800 * n_fft / fs) + 1, TONE_SPACING_BINS)
    mels = dsp.hz_to_mel(bins * fs / n_fft)
    edges = np.linspace(mels[0], mels[-1] + 1e-9, n_sources + 1)
    band = np.searchsorted(edges, mels, side="right") - 1
    t = np.arange(n_fft)
    phases = rng.uniform(0, 2 * np.pi, len(bins))
    periods = np.zeros((n_sources, n_fft))
    for b, ph, j in zip(bins, phases, band):
        periods[j] += np.cos(2 * np.pi * b * t / n_fft + ph)
    periods /= np.sqrt(np.bincount(band, minlength=n_sources))[:, None]

    ctl_rate = 100.0
    n_ctl = int(math.ceil(duration_s * ctl_rate)) + 2
    ctl_t = np.arange(n_ctl) / ctl_rate
    sig = ENVELOPE_SMOOTH_S * ctl_rate
    audio_t = np.arange(n) / fs
    audio = np.zeros(n)
    reps = n // n_fft + 1
    for j in range(n_sources):
        env = np.exp(log_spread * _smooth_noise(rng, n_ctl, sig))
        audio += np.interp(audio_t, ctl_t, env) * np.tile(periods[j], reps)[:n]
    return 0.9 * audio / np.abs(audio).max()


def alternating_blocks(duration_s: float, block_s: float = 30.0,
                       labels=("speech", "music")) -> AnnotationTrack:
    n = int(duration_s // block_s)
    return AnnotationTrack(tuple(Event(i * block_s, block_s, labels[i % 2]) for i in range(n)))


def identity_mixing(n_channels: int, n_mels: int = melfront.N_MELS) -> np.ndarray:
    """Channel c reads mel band round(c * n_mels / n_channels)."""
    m = np.zeros((n_channels, n_mels))
    m[np.arange(n_channels), (np.arange(n_channels) * n_mels) // n_channels] = 1.0
    return m


def generate(n_channels: int = 64, duration_s: float = 390.0, mixing=None,
             noise_sigma: float = 0.05, seed: int = 7, lag_s: float = melfront.LAG_S,
             fs: float = EEG_FS, line_noise: bool = True) -> SynthData:
    """Build a recording, its stimulus audio and alternating speech/music annotations.

    The recording carries ``n_channels`` good ECoG channels followed by one
    flagged-bad ECoG channel and one non-neural channel, which channel
    selection is expected to discard.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if n_channels < 1:
        raise ValueError("n_channels must be positive")
    rng = np.random.default_rng(seed)
    if mixing is None:
        mixing = rng.standard_normal((n_channels, melfront.N_MELS)) / math.sqrt(melfront.N_MELS)
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (n_channels, melfront.N_MELS):
        raise ValueError(f"mixing must be {n_channels} x {melfront.N_MELS}, got {mixing.shape}")
    if np.linalg.matrix_rank(mixing) == 0:
        raise ValueError("mixing matrix has rank 0")

    audio = stimulus(duration_s, rng)
    mel = melfront.mel_spectrogram(audio, melfront.AUDIO_FS, log_compressed=True)
    drive = mel.values @ mixing.T
    drive = (drive - drive.mean(axis=0)) / np.maximum(drive.std(axis=0), 1e-12)

    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    src_t = np.asarray(mel.frame_times_s)
    ctl_rate = 100.0
    n_ctl = int(math.ceil(duration_s * ctl_rate)) + 2
    ctl_t = np.arange(n_ctl) / ctl_rate
    samples = np.empty((n_channels + 2, n))
    phases = rng.uniform(0, 2 * np.pi, n_channels)
    for c in range(n_channels):
        latent = np.interp(t - lag_s, src_t, drive[:, c])
        noise = np.interp(t, ctl_t, _smooth_noise(rng, n_ctl, NOISE_SMOOTH_S * ctl_rate))
        amp = np.maximum(1.0 + DEPTH * (latent + noise_sigma * noise), 0.05)
        f = CARRIERS_HZ[c % len(CARRIERS_HZ)]
        samples[c] = AMPLITUDE_UV * amp * np.cos(2 * np.pi * f * t + phases[c])
    # slow drift and mains hum, both removed by preprocessing
    drift = rng.uniform(-20, 20, n_channels)[:, None] * (t / max(duration_s, 1e-9) - 0.5)
    samples[:n_channels] += drift
    if line_noise:
        hum = sum(np.cos(2 * np.pi * 50 * k * t + rng.uniform(0, 2 * np.pi)) / k for k in (1, 2, 3))
        samples[:n_channels] += 0.5 * AMPLITUDE_UV * hum
    samples[n_channels] = AMPLITUDE_UV * rng.standard_normal(n)  # bad contact
    samples[n_channels + 1] = 500.0 * np.sin(2 * np.pi * 1.2 * t)  # ECG-like
    channels = [ChannelMeta(f"G{c + 1:03d}", "ECoG") for c in range(n_channels)]
    channels += [ChannelMeta("BAD1", "ECoG", bad=True), ChannelMeta("EKG1", "other")]
    rec = Recording(fs, tuple(channels), samples.astype(np.float32))
    return SynthData(rec, audio, float(melfront.AUDIO_FS), alternating_blocks(duration_s),
                     mel, mixing)


def ols_oracle_mse(train_X, train_Y, test_X, test_Y) -> float:
    """Test MSE of closed-form least squares in the train-standardized target space."""
    mu_x, sd_x = train_X.mean(axis=0), np.maximum(train_X.std(axis=0), 1e-8)
    mu_y, sd_y = train_Y.mean(axis=0), np.maximum(train_Y.std(axis=0), 1e-8)
    A = np.column_stack([(train_X - mu_x) / sd_x, np.ones(len(train_X))])
    B = (train_Y - mu_y) / sd_y
    coef, *_ = np.linalg.lstsq(A, B, rcond=None)
    At = np.column_stack([(test_X - mu_x) / sd_x, np.ones(len(test_X))])
    resid = At @ coef - (test_Y - mu_y) / sd_y
    return float(np.mean(resid**2))


def mean_baseline_mse(train_Y, test_Y) -> float:
    mu, sd = train_Y.mean(axis=0), np.maximum(train_Y.std(axis=0), 1e-8)
    return float(np.mean(((test_Y - mu) / sd) ** 2))
