"""Mel spectrogram targets and lag-corrected pairing with neural feature frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .features import FeatureMatrix
from .io import AnnotationTrack, MatrixContainer, read_matrix, write_matrix

AUDIO_FS = 22050
N_FFT = 1024
HOP = 220  # 9.977 ms; 10 ms is not a whole number of samples at 22050 Hz
N_MELS = 80
FMIN, FMAX = 0.0, 8000.0
LOG_FLOOR = 1e-10
LAG_S = 0.150


def default_params(log_compressed: bool = True) -> dict:
    return {"fs": AUDIO_FS, "n_fft": N_FFT, "hop_samples": HOP, "n_mels": N_MELS,
            "fmin": FMIN, "fmax": FMAX, "power": 2, "log_compressed": bool(log_compressed)}


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [n_frames, n_mels]
    frame_times_s: np.ndarray
    params: dict = field(default_factory=default_params)

    def __post_init__(self):
        if len(self.frame_times_s) != len(self.values):
            raise ValueError("one timestamp per frame required")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def to_container(self) -> MatrixContainer:
        fr = self.params["fs"] / self.params["hop_samples"]
        return MatrixContainer(self.values, fr, float(self.frame_times_s[0]),
                               {"kind": "mel", "params": self.params})

    @classmethod
    def from_container(cls, m: MatrixContainer) -> "MelSpectrogram":
        params = m.meta.get("params") or default_params()
        times = (m.t0_s or 0.0) + np.arange(m.rows) * params["hop_samples"] / params["fs"]
        return cls(m.data, times, params)


_fb_cache: dict = {}


def filterbank(params: dict | None = None) -> dsp.MelFilterbank:
    p = params or default_params()
    key = (p["n_mels"], p["n_fft"], p["fs"], p["fmin"], p["fmax"])
    if key not in _fb_cache:
        _fb_cache[key] = dsp.mel_filterbank(*key)
    return _fb_cache[key]


def mel_spectrogram(audio, fs: float = AUDIO_FS, log_compressed: bool = True,
                    t0_s: float = 0.0) -> MelSpectrogram:
    """|STFT|^2 projected on the 80-band mel filterbank, optionally ln(x + 1e-10)."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.size == 0:
        raise ValueError("empty audio")
    if fs != AUDIO_FS:
        raise ValueError(f"mel front-end expects {AUDIO_FS} Hz audio, got {fs}; resample first")
    params = default_params(log_compressed)
    fb = filterbank(params).weights.T
    blocks = [p @ fb for p in dsp.power_frames(audio, N_FFT, HOP)]
    mel = np.concatenate(blocks)
    if log_compressed:
        mel = np.log(mel + LOG_FLOOR)
    times = t0_s + np.arange(len(mel)) * HOP / AUDIO_FS
    return MelSpectrogram(mel, times, params)


def segment_mels(audio, fs: float, track: AnnotationTrack, label: str = "speech",
                 log_compressed: bool = True) -> list[MelSpectrogram]:
    """One mel spectrogram per matching event, computed on that block's audio only."""
    if fs != AUDIO_FS:
        audio = dsp.resample(audio, fs, AUDIO_FS)
    out = []
    for e in track.events:
        if e.label != label:
            continue
        a, b = int(round(e.onset_s * AUDIO_FS)), int(round(e.end_s * AUDIO_FS))
        if b > len(audio):
            raise ValueError(f"event {e} runs past the end of the audio")
        out.append(mel_spectrogram(audio[a:b], AUDIO_FS, log_compressed, a / AUDIO_FS))
    return out


@dataclass
class PairedDataset:
    X: np.ndarray  # [n_pairs, n_channels]
    Y: np.ndarray  # [n_pairs, n_mels]
    segment_ids: np.ndarray
    lag_s: float = LAG_S
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.X) != len(self.Y) or len(self.X) != len(self.segment_ids):
            raise ValueError("X, Y and segment_ids must have equal row counts")

    def __len__(self):
        return len(self.X)

    def rows(self, idx) -> "PairedDataset":
        return PairedDataset(self.X[idx], self.Y[idx], self.segment_ids[idx], self.lag_s, self.meta)


def pair_indices(feat_times: np.ndarray, mel_times: np.ndarray, lag_s: float,
                 max_err_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices (feature, mel) pairing each feature frame with the nearest mel frame to t - lag.

    Pairs whose nearest mel center is further than ``max_err_s`` are dropped.
    """
    target = feat_times - lag_s
    pos = np.searchsorted(mel_times, target)
    lo = np.clip(pos - 1, 0, len(mel_times) - 1)
    hi = np.clip(pos, 0, len(mel_times) - 1)
    pick = np.where(np.abs(mel_times[hi] - target) < np.abs(mel_times[lo] - target), hi, lo)
    keep = np.abs(mel_times[pick] - target) <= max_err_s + 1e-12
    return np.flatnonzero(keep), pick[keep]


def align_pairs(mels: list[MelSpectrogram], feats: list[FeatureMatrix],
                lag_s: float = LAG_S) -> PairedDataset:
    """Pair feature frames with mel frames, segment by segment, then concatenate.

    The feature frame centered at t is explained by the mel frame nearest to
    t - lag (the stimulus precedes the neural response). The pairing error is
    capped at half the larger frame period.
    """
    if len(mels) != len(feats):
        raise ValueError(f"{len(mels)} mel segments vs {len(feats)} feature segments")
    xs, ys, ids = [], [], []
    for i, (m, f) in enumerate(zip(mels, feats)):
        mel_period = m.params["hop_samples"] / m.params["fs"]
        max_err = max(mel_period, 1 / f.frame_rate_hz) / 2
        fi, mi = pair_indices(f.frame_times_s, np.asarray(m.frame_times_s), lag_s, max_err)
        xs.append(f.values[fi])
        ys.append(m.values[mi])
        ids.append(np.full(len(fi), i, dtype=np.int64))
    X = np.concatenate(xs) if xs else np.zeros((0, 0))
    if len(X) == 0:
        raise ValueError("no overlapping frames after the lag shift")
    params = mels[0].params
    return PairedDataset(X, np.concatenate(ys), np.concatenate(ids), lag_s,
                         {"mel_params": params, "channels": list(feats[0].channel_names)})


def save_paired(d: PairedDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(MatrixContainer(d.X, meta={"kind": "paired-X"}), out / "X.mat.json")
    write_matrix(MatrixContainer(d.Y, meta={"kind": "paired-Y"}), out / "Y.mat.json")
    runs = []
    for sid in np.unique(d.segment_ids):
        rows = np.flatnonzero(d.segment_ids == sid)
        runs.append({"segment": int(sid), "start": int(rows[0]), "stop": int(rows[-1]) + 1})
    manifest = {"lag_s": d.lag_s, "n_pairs": len(d), "segments": runs, **d.meta}
    (out / "paired.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_paired(in_dir) -> PairedDataset:
    d = Path(in_dir)
    manifest = json.loads((d / "paired.json").read_text())
    X = read_matrix(d / "X.mat.json").data
    Y = read_matrix(d / "Y.mat.json").data
    ids = np.empty(len(X), dtype=np.int64)
    for run in manifest["segments"]:
        ids[run["start"]:run["stop"]] = run["segment"]
    meta = {k: v for k, v in manifest.items() if k not in ("lag_s", "n_pairs", "segments")}
    return PairedDataset(X, Y, ids, manifest["lag_s"], meta)
