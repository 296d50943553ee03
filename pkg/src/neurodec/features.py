"""Windowed Hilbert-envelope features for each channel of a speech segment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .io import MatrixContainer, Recording

WIN_S = 0.050
SHIFT_S = 0.010
BAND_HZ = (1.0, 120.0)
BAND_ORDER = 4


@dataclass(frozen=True)
class FeatureMatrix:
    """values[k, c] = mean envelope of channel c in window k; times are window centers."""

    values: np.ndarray
    t0_s: float
    frame_rate_hz: float = 1 / SHIFT_S
    channel_names: tuple[str, ...] = field(default=())

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def frame_times_s(self) -> np.ndarray:
        return self.t0_s + np.arange(self.n_frames) / self.frame_rate_hz

    def to_container(self, **meta) -> MatrixContainer:
        meta = {"kind": "features", "channels": list(self.channel_names), **meta}
        return MatrixContainer(self.values, self.frame_rate_hz, self.t0_s, meta)

    @classmethod
    def from_container(cls, m: MatrixContainer) -> "FeatureMatrix":
        return cls(m.data, m.t0_s or 0.0, m.frame_rate_hz or 1 / SHIFT_S,
                   tuple(m.meta.get("channels", ())))


def n_windows(duration_s: float, win_s: float = WIN_S, shift_s: float = SHIFT_S) -> int:
    # small epsilon so 30 s / 10 ms does not lose a frame to rounding
    return int(np.floor((duration_s - win_s) / shift_s + 1e-9)) + 1


def envelope(x: np.ndarray, fs: float, band=BAND_HZ) -> np.ndarray:
    """|analytic(bandpass(detrend(x)))| along the last axis."""
    f = dsp.butter_bandpass(band[0], band[1], BAND_ORDER, fs)
    return np.abs(dsp.hilbert_analytic(dsp.filtfilt(f, dsp.detrend_linear(x))))


def extract_features(segment: Recording, t_start_s: float = 0.0, win_s: float = WIN_S,
                     shift_s: float = SHIFT_S, band=BAND_HZ) -> FeatureMatrix:
    """Mean Hilbert envelope per window [k*shift, k*shift + win) for every channel.

    The detrend, band-pass and Hilbert steps run over the whole segment; only
    the averaging is windowed. Window k is stamped at t_start + k*shift + win/2.
    """
    fs = segment.sampling_rate_hz
    if band[1] >= fs / 2:
        raise ValueError(f"band edge {band[1]} Hz is not below Nyquist {fs / 2} Hz")
    if segment.duration_s < win_s:
        raise ValueError(f"segment of {segment.duration_s:.4f} s is shorter than one window")
    env = envelope(segment.samples, fs, band)
    n = n_windows(segment.duration_s, win_s, shift_s)
    win_len = int(round(win_s * fs))
    starts = np.round(np.arange(n) * shift_s * fs).astype(np.int64)
    starts = np.minimum(starts, segment.n_samples - win_len)
    csum = np.concatenate([np.zeros((env.shape[0], 1)), np.cumsum(env, axis=1)], axis=1)
    means = (csum[:, starts + win_len] - csum[:, starts]) / win_len
    return FeatureMatrix(
        np.ascontiguousarray(means.T), t_start_s + win_s / 2, 1 / shift_s,
        tuple(segment.channel_names),
    )
