"""Mel inversion and Griffin-Lim resynthesis for listening to decoded spectrograms."""

from __future__ import annotations

import numpy as np

from . import dsp, melfront
from .io import write_wav

PEAK = 0.9

_pinv_cache: dict = {}


def _pinv(params: dict) -> np.ndarray:
    key = (params["n_mels"], params["n_fft"], params["fs"], params["fmin"], params["fmax"])
    if key not in _pinv_cache:
        _pinv_cache[key] = np.linalg.pinv(melfront.filterbank(params).weights)
    return _pinv_cache[key]


def mel_to_linear(mel: melfront.MelSpectrogram) -> np.ndarray:
    """Magnitude spectrogram [n_frames, n_fft/2 + 1] via the filterbank pseudo-inverse."""
    p = mel.params
    if p.get("power", 2) != 2:
        raise ValueError("only power mel spectrograms can be inverted")
    if mel.values.shape[1] != p["n_mels"]:
        raise ValueError(f"mel has {mel.values.shape[1]} bands but params say {p['n_mels']}")
    power = np.exp(mel.values) if p["log_compressed"] else np.asarray(mel.values)
    linear = power @ _pinv(p).T
    return np.sqrt(np.maximum(linear, 0.0))


def spectral_convergence(y, mag, hop: int, n_fft: int) -> float:
    S = np.abs(dsp.stft(y, n_fft, hop))
    n = min(len(S), len(mag))
    norm = np.linalg.norm(mag[:n])
    return float(np.linalg.norm(S[:n] - mag[:n]) / norm) if norm > 0 else 0.0


def griffin_lim(mag, n_iter: int = 32, momentum: float = 0.99, seed: int = 0,
                hop: int = melfront.HOP, n_fft: int = melfront.N_FFT, length: int | None = None,
                errors: list | None = None) -> np.ndarray:
    """Fast Griffin-Lim (momentum-accelerated) starting from seeded random phase.

    If ``errors`` is a list, the spectral convergence of the current estimate
    is appended after every iteration.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if n_iter < 1:
        raise ValueError("n_iter must be at least 1")
    if np.any(mag < 0):
        raise ValueError("magnitudes must be non-negative")
    if length is None:
        length = hop * (len(mag) - 1)
    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(mag.shape))
    rebuilt = np.zeros_like(angles)
    alpha = momentum / (1 + momentum)
    for _ in range(n_iter):
        prev = rebuilt
        y = dsp.istft(mag * angles, hop, n_fft, length=length)
        rebuilt = dsp.stft(y, n_fft, hop)[: len(mag)]
        if errors is not None:
            norm = np.linalg.norm(mag)
            errors.append(float(np.linalg.norm(np.abs(rebuilt) - mag) / norm) if norm > 0 else 0.0)
        angles = rebuilt - alpha * prev
        angles /= np.abs(angles) + 1e-16
    return dsp.istft(mag * angles, hop, n_fft, length=length)


def peak_normalize(y, peak: float = PEAK) -> np.ndarray:
    m = np.max(np.abs(y)) if len(y) else 0.0
    return y * (peak / m) if m > 0 else np.asarray(y, dtype=np.float64)


def mel_to_audio(mel: melfront.MelSpectrogram, seed: int = 0, n_iter: int = 32,
                 momentum: float = 0.99) -> np.ndarray:
    p = mel.params
    y = griffin_lim(mel_to_linear(mel), n_iter, momentum, seed, p["hop_samples"], p["n_fft"])
    return peak_normalize(y)


def synthesize(ckpt, X, out_wav, segment_ids=None, seed: int = 0, mel_params: dict | None = None):
    """predict -> pseudo-inverse -> Griffin-Lim -> peak 0.9 -> WAV at the mel sampling rate."""
    from .decoders import predict

    pred = predict(ckpt, X, segment_ids)
    params = mel_params or ckpt.config.get("mel_params") or melfront.default_params()
    times = np.arange(len(pred)) * params["hop_samples"] / params["fs"]
    mel = melfront.MelSpectrogram(pred, times, params)
    y = mel_to_audio(mel, seed)
    write_wav(y, params["fs"], out_wav)
    return y
