"""File formats: recordings, matrices, events, WAV audio and model checkpoints.

Every binary payload is a raw little-endian float32 blob sitting next to a JSON
header that describes it. Headers are the only thing a human needs to read.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1
CHANNEL_KINDS = ("ECoG", "sEEG", "other")
# refuse headers that would need more than 2**31 floats
MAX_ELEMENTS = 2**31

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file on disk does not match the declared layout."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _blob_path(header_path: Path, suffix: str) -> Path:
    name = header_path.name
    if name.endswith(".json"):
        name = name[: -len(".json")]
    return header_path.with_name(name + suffix)


def _write_blob(path: Path, data: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(data, dtype=_F32).tobytes())


def _read_blob(path: Path, n: int) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing data blob {path}")
    raw = path.read_bytes()
    if len(raw) != 4 * n:
        raise FormatError(f"{path}: expected {4 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=_F32).copy()


def _check_finite(data: np.ndarray, what: str, names: list[str] | None = None) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        idx = np.argwhere(bad)[0]
        if names is not None and data.ndim == 2:
            raise FormatError(
                f"{what}: non-finite value in channel {names[idx[0]]!r} at sample {idx[1]}"
            )
        raise FormatError(f"{what}: non-finite value at index {tuple(int(i) for i in idx)}")


def _check_version(header: dict, path: Path) -> None:
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unknown format version {header.get('version')!r}")


# -- recordings -------------------------------------------------------------


@dataclass(frozen=True)
class ChannelMeta:
    name: str
    kind: str = "ECoG"
    bad: bool = False

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"channel kind must be one of {CHANNEL_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class Recording:
    """Multichannel time series, samples shaped [n_channels, n_samples]."""

    sampling_rate_hz: float
    channels: tuple[ChannelMeta, ...]
    samples: np.ndarray

    def __post_init__(self):
        if not self.sampling_rate_hz > 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        channels = tuple(self.channels)
        object.__setattr__(self, "channels", channels)
        if not channels:
            raise ValueError("a recording needs at least one channel")
        names = [c.name for c in channels]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate channel names: {dup}")
        samples = np.array(self.samples, dtype=np.float64, ndmin=2)
        if samples.ndim != 2 or samples.shape[0] != len(channels):
            raise ValueError(
                f"samples shape {samples.shape} does not match {len(channels)} channels"
            )
        if samples.shape[1] < 1:
            raise ValueError("a recording needs at least one sample")
        _check_finite(samples, "recording", names)
        object.__setattr__(self, "samples", _frozen(samples))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    def replace(self, samples=None, channels=None) -> "Recording":
        return Recording(
            self.sampling_rate_hz,
            self.channels if channels is None else channels,
            self.samples if samples is None else samples,
        )


def write_recording(r: Recording, header_path) -> None:
    """Write ``r`` as ``<name>.rec.json`` plus a sibling ``<name>.rec.f32`` blob.

    Samples are stored as float32, so a recording read back from disk is
    bitwise identical to what was written only if it held float32 values.
    """
    header_path = Path(header_path)
    blob = _blob_path(header_path, ".f32")
    header = {
        "format": "neurodec-recording",
        "version": FORMAT_VERSION,
        "sampling_rate_hz": float(r.sampling_rate_hz),
        "n_channels": r.n_channels,
        "n_samples": r.n_samples,
        "channels": [{"name": c.name, "kind": c.kind, "bad": c.bad} for c in r.channels],
        "blob": blob.name,
    }
    header_path.write_text(json.dumps(header, indent=1))
    _write_blob(blob, r.samples)


def read_recording(header_path) -> Recording:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    _check_version(h, header_path)
    n_ch, n_s = int(h["n_channels"]), int(h["n_samples"])
    if n_ch < 1 or n_s < 1 or n_ch * n_s > MAX_ELEMENTS:
        raise FormatError(f"{header_path}: implausible shape {n_ch} x {n_s}")
    if len(h["channels"]) != n_ch:
        raise FormatError(f"{header_path}: {len(h['channels'])} channel entries for {n_ch} channels")
    fs = float(h["sampling_rate_hz"])
    if not fs > 0:
        raise FormatError(f"{header_path}: sampling rate must be positive, got {fs}")
    data = _read_blob(header_path.with_name(h["blob"]), n_ch * n_s).reshape(n_ch, n_s)
    channels = [ChannelMeta(c["name"], c.get("kind", "other"), bool(c.get("bad", False)))
                for c in h["channels"]]
    try:
        return Recording(fs, tuple(channels), data)
    except ValueError as e:
        raise FormatError(f"{header_path}: {e}") from None


# -- matrices ---------------------------------------------------------------


@dataclass(frozen=True)
class MatrixContainer:
    """Generic 2-D float matrix with optional time axis metadata.

    ``meta`` carries any extra JSON-serializable key/values (mel parameters,
    segment tables, ...).
    """

    data: np.ndarray
    frame_rate_hz: float | None = None
    t0_s: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"matrix must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"matrix must be non-empty, got shape {data.shape}")
        if self.frame_rate_hz is not None and not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        _check_finite(data, "matrix")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]


def write_matrix(m: MatrixContainer, header_path) -> None:
    header_path = Path(header_path)
    blob = _blob_path(header_path, ".f32")
    header = {
        "format": "neurodec-matrix",
        "version": FORMAT_VERSION,
        "rows": m.rows,
        "cols": m.cols,
        "frame_rate_hz": m.frame_rate_hz,
        "t0_s": m.t0_s,
        "meta": m.meta,
        "blob": blob.name,
    }
    header_path.write_text(json.dumps(header, indent=1))
    _write_blob(blob, m.data)


def read_matrix(header_path) -> MatrixContainer:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    _check_version(h, header_path)
    rows, cols = int(h["rows"]), int(h["cols"])
    if rows < 1 or cols < 1:
        raise FormatError(f"{header_path}: empty matrix {rows} x {cols}")
    if rows * cols > MAX_ELEMENTS:
        raise FormatError(f"{header_path}: {rows} x {cols} exceeds the element limit")
    data = _read_blob(header_path.with_name(h["blob"]), rows * cols).reshape(rows, cols)
    _check_finite(data, str(header_path))
    return MatrixContainer(data, h.get("frame_rate_hz"), h.get("t0_s"), h.get("meta") or {})


# -- events -----------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    onset_s: float
    duration_s: float
    label: str

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class AnnotationTrack:
    events: tuple[Event, ...] = ()

    def __post_init__(self):
        events = tuple(sorted(self.events, key=lambda e: (e.onset_s, e.duration_s)))
        for e in events:
            if not (e.onset_s >= 0 and math.isfinite(e.onset_s)):
                raise ValueError(f"negative or non-finite onset: {e}")
            if not (e.duration_s > 0 and math.isfinite(e.duration_s)):
                raise ValueError(f"duration must be positive: {e}")
        for a, b in zip(events, events[1:]):
            if b.onset_s < a.end_s:
                raise ValueError(f"overlapping events: {a} and {b}")
        object.__setattr__(self, "events", events)

    def __len__(self):
        return len(self.events)

    def check_within(self, duration_s: float) -> None:
        for e in self.events:
            if e.end_s > duration_s + 1e-9:
                raise ValueError(f"event {e} runs past the recording end at {duration_s} s")


def read_events(path) -> AnnotationTrack:
    """Read a BIDS-style ``events.tsv`` (columns onset, duration, trial_type)."""
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.DictReader(f, delimiter="\t")
        missing = {"onset", "duration", "trial_type"} - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        rows = [
            Event(float(r["onset"]), float(r["duration"]), r["trial_type"].strip())
            for r in reader
        ]
    try:
        return AnnotationTrack(tuple(rows))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None


def write_events(track: AnnotationTrack, path) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["onset", "duration", "trial_type"])
        for e in track.events:
            w.writerow([repr(float(e.onset_s)), repr(float(e.duration_s)), e.label])


# -- WAV --------------------------------------------------------------------

_PCM, _IEEE_FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path) -> tuple[np.ndarray, float]:
    """Read a mono PCM-16 or float32 WAV file; PCM is scaled by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) != size:
            raise FormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise FormatError(f"{path}: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE and size >= 26:
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    codec, n_ch, fs, _, block, bits = fmt
    if n_ch != 1:
        raise FormatError(f"{path}: expected mono audio, got {n_ch} channels")
    if codec == _PCM and bits == 16:
        x = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif codec == _IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data[: len(data) // 4 * 4], dtype=_F32).astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported codec {codec} with {bits} bits")
    if fs <= 0:
        raise FormatError(f"{path}: invalid sampling rate {fs}")
    return x, float(fs)


def write_wav(samples, fs: float, path, pcm16: bool = False) -> None:
    """Write mono audio as float32 (default) or PCM-16 (clipped, scaled by 32768)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    _check_finite(x, "audio")
    if int(fs) != fs or fs <= 0:
        raise ValueError(f"WAV needs a positive integer sampling rate, got {fs}")
    if pcm16:
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        codec, bits = _PCM, 16
    else:
        payload = x.astype(_F32).tobytes()
        codec, bits = _IEEE_FLOAT, 32
    block = bits // 8
    fmt = struct.pack("<HHIIHH", codec, 1, int(fs), int(fs) * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\0"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)


# -- checkpoints ------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    """Everything needed to rebuild a trained decoder.

    ``layers`` are plain dicts (see ``neurodec.nn.layer_from_spec``); ``weights``
    holds one list of arrays per layer in the layer's parameter order.
    """

    layers: list[dict]
    weights: list[list[np.ndarray]]
    scalers: dict[str, dict]
    config: dict[str, Any]
    rng_seed: int


def save_checkpoint(ckpt: ModelCheckpoint, header_path) -> None:
    header_path = Path(header_path)
    blob = _blob_path(header_path, ".f32")
    arrays, shapes = [], []
    for layer_weights in ckpt.weights:
        shapes.append([list(w.shape) for w in layer_weights])
        arrays.extend(np.asarray(w, dtype=_F32).ravel() for w in layer_weights)
    header = {
        "format": "neurodec-checkpoint",
        "version": FORMAT_VERSION,
        "layers": ckpt.layers,
        "weight_shapes": shapes,
        "scalers": ckpt.scalers,
        "config": ckpt.config,
        "rng_seed": int(ckpt.rng_seed),
        "blob": blob.name,
    }
    header_path.write_text(json.dumps(header, indent=1, sort_keys=True))
    _write_blob(blob, np.concatenate(arrays) if arrays else np.zeros(0))


def load_checkpoint(header_path) -> ModelCheckpoint:
    header_path = Path(header_path)
    h = json.loads(header_path.read_text())
    if h.get("format") != "neurodec-checkpoint":
        raise FormatError(f"{header_path}: not a checkpoint")
    _check_version(h, header_path)
    shapes = h["weight_shapes"]
    if len(shapes) != len(h["layers"]):
        raise FormatError(f"{header_path}: {len(shapes)} weight groups for {len(h['layers'])} layers")
    total = sum(int(np.prod(s)) for group in shapes for s in group)
    flat = _read_blob(header_path.with_name(h["blob"]), total)
    weights, pos = [], 0
    for group in shapes:
        ws = []
        for s in group:
            n = int(np.prod(s))
            ws.append(flat[pos:pos + n].reshape(s))
            pos += n
        weights.append(ws)
    return ModelCheckpoint(h["layers"], weights, h["scalers"], h["config"], h["rng_seed"])
