"""Converter profile: map a BIDS iEEG run (e.g. OpenNeuro ds003688) onto the native containers.

Reading BrainVision/EDF files is left to the user (``mne.io.read_raw_brainvision``
or similar); this module takes the resulting array plus the BIDS sidecars.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import dsp
from .io import (AnnotationTrack, ChannelMeta, Event, Recording, write_events,
                 write_recording, write_wav)

BIDS_TYPE_MAP = {"ECOG": "ECoG", "SEEG": "sEEG"}
PROTOCOL_FS = 512.0
AUDIO_FS = 22050


def read_bids_channels(path) -> list[ChannelMeta]:
    """channels.tsv -> ChannelMeta (type ECOG/SEEG kept, status 'bad' flagged)."""
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    if rows and not {"name", "type"} <= set(rows[0]):
        raise ValueError(f"{path}: channels.tsv needs 'name' and 'type' columns")
    return [
        ChannelMeta(r["name"], BIDS_TYPE_MAP.get(r["type"].strip().upper(), "other"),
                    r.get("status", "good").strip().lower() == "bad")
        for r in rows
    ]


def relabel_events(path, label_map: dict[str, str]) -> AnnotationTrack:
    """Read a BIDS events.tsv keeping only rows whose trial_type is in ``label_map``."""
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    events = [
        Event(float(r["onset"]), float(r["duration"]), label_map[r["trial_type"].strip()])
        for r in rows if r.get("trial_type", "").strip() in label_map
    ]
    return AnnotationTrack(tuple(events))


def convert_run(data, fs: float, channels: list[ChannelMeta], events: AnnotationTrack,
                out_dir, audio=None, audio_fs: float | None = None) -> Path:
    """Write recording.rec.json, events.tsv and (optionally) stimulus.wav into ``out_dir``.

    ``data`` is [n_channels, n_samples] in microvolts. The stimulus is
    resampled to 22050 Hz when it arrives at another rate.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = Recording(float(fs), tuple(channels), np.asarray(data, dtype=np.float32))
    events.check_within(rec.duration_s)
    write_recording(rec, out / "recording.rec.json")
    write_events(events, out / "events.tsv")
    if audio is not None:
        if audio_fs is None:
            raise ValueError("audio_fs is required with audio")
        a = np.asarray(audio, dtype=np.float64)
        if a.ndim == 2:
            a = a.mean(axis=0 if a.shape[0] < a.shape[1] else 1)
        if audio_fs != AUDIO_FS:
            a = dsp.resample(a, audio_fs, AUDIO_FS)
        write_wav(a, AUDIO_FS, out / "stimulus.wav")
    return out / "recording.rec.json"
