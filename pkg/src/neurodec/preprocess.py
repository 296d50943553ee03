"""Channel selection, line-noise notches, common average reference, block cropping."""

from __future__ import annotations

import numpy as np

from . import dsp
from .io import AnnotationTrack, Recording

NEURAL_KINDS = ("ECoG", "sEEG")
LINE_HZ = 50.0
NOTCH_Q = 30.0


def select_channels(r: Recording) -> Recording:
    """Keep good ECoG/sEEG channels that are not exactly flat, in their original order."""
    keep = [
        i for i, c in enumerate(r.channels)
        if c.kind in NEURAL_KINDS and not c.bad and np.var(r.samples[i]) > 0
    ]
    if not keep:
        raise ValueError("no usable channels left after selection")
    return r.replace(samples=r.samples[keep], channels=[r.channels[i] for i in keep])


def line_noise_frequencies(fs: float, base_hz: float = LINE_HZ) -> list[float]:
    return [base_hz * k for k in range(1, int(fs / 2 / base_hz) + 2) if base_hz * k < fs / 2]


def remove_line_noise(r: Recording, base_hz: float = LINE_HZ, q: float = NOTCH_Q) -> Recording:
    f = dsp.line_noise_notches(r.sampling_rate_hz, base_hz, q)
    return r.replace(samples=dsp.filtfilt(f, r.samples))


def common_average_reference(r: Recording) -> Recording:
    return r.replace(samples=r.samples - r.samples.mean(axis=0, keepdims=True))


def crop_segments(r: Recording, track: AnnotationTrack,
                  label: str = "speech") -> list[tuple[Recording, float]]:
    """Cut one segment per event labelled ``label``; returns (segment, start time) pairs.

    Sample range is [round(onset*fs), round((onset+duration)*fs)).
    """
    track.check_within(r.duration_s)
    fs = r.sampling_rate_hz
    out = []
    for e in track.events:
        if e.label != label:
            continue
        a = int(round(e.onset_s * fs))
        b = int(round(e.end_s * fs))
        if b > r.n_samples:
            raise ValueError(f"event {e} ends after the recording")
        out.append((r.replace(samples=r.samples[:, a:b]), a / fs))
    return out


def preprocess(r: Recording, track: AnnotationTrack, label: str = "speech"):
    """select -> notch -> CAR -> crop, in that order."""
    r = select_channels(r)
    r = remove_line_noise(r)
    r = common_average_reference(r)
    return crop_segments(r, track, label)
