"""Result tables, spectrogram images and run manifests."""

from __future__ import annotations

import csv
import io as _io
import json
import platform
import time
from pathlib import Path

import numpy as np

from .io import MatrixContainer

TABLE_COLUMNS = ("subject", "model", "best_train_loss", "best_val_mse", "test_mse", "n_runs")

# Published per-subject numbers (best training loss, best validation MSE), kept
# for side-by-side reading only; they come from the clinical recordings.
REFERENCE_RESULTS = {
    "fcdnn": {38: (0.0210, 0.6982), 43: (0.0336, 0.7381), 46: (0.2643, 0.7923),
              55: (0.2015, 0.7210), 60: (0.3900, 0.6520), 13: (0.3256, 0.8052)},
    "cnn2d": {38: (0.4121, 0.7023), 43: (0.5321, 0.7326), 46: (0.8043, 0.6920),
              55: (0.9605, 0.7879), 60: (0.9039, 0.7922), 13: (0.9039, 0.8781)},
}


def spectrogram_pgm(data) -> bytes:
    """Binary PGM of a [frames x bins] matrix: x = frame, y = bin with bin 0 at the bottom."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("need a non-empty 2-D matrix")
    lo, hi = a.min(), a.max()
    if hi > lo:
        pix = np.round((a - lo) / (hi - lo) * 255.0)
    else:
        pix = np.full(a.shape, 128.0)
    img = pix.T[::-1].astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def render_spectrogram_image(m: MatrixContainer | np.ndarray, out_path) -> None:
    data = m.data if isinstance(m, MatrixContainer) else m
    Path(out_path).write_bytes(spectrogram_pgm(data))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(raw[-w * h:], dtype=np.uint8).reshape(h, w)


def results_table(groups) -> str:
    """CSV (LF endings) with one row per (subject, model) run group.

    Each group is a dict with ``subject``, ``model``, ``histories`` (TrainHistory
    list) and optionally ``test_mse`` (one value per run). The test MSE reported
    is that of the run with the best validation MSE.
    """
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for g in groups:
        hists = g["histories"]
        if not hists:
            continue
        vals = [h.best_val_mse for h in hists]
        best = int(np.argmin(vals))
        tests = g.get("test_mse") or []
        test = tests[best] if tests else float("nan")
        w.writerow([g["subject"], g["model"], f"{min(h.best_train_loss for h in hists):.6f}",
                    f"{vals[best]:.6f}", f"{test:.6f}", len(hists)])
    return buf.getvalue()


def history_csv(summary_rows) -> str:
    """Per-epoch history rows (run, epoch, train_loss, val_mse) as CSV."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "epoch", "train_loss", "val_mse"])
    for r in summary_rows:
        w.writerow([r["run"], r["epoch"], f"{r['train_loss']:.8f}", f"{r['val_mse']:.8f}"])
    return buf.getvalue()


def environment_info() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform()}


def write_run_manifest(cfg: dict, environment: dict, decisions: dict, path,
                       timestamp: float | None = None) -> dict:
    """Record configuration, environment and every fixed design choice of a run."""
    if cfg.get("seed") is None:
        raise ValueError("run manifest requires a seed")
    manifest = {
        "config": cfg,
        "environment": environment,
        "decisions": decisions,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(timestamp)),
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=_jsonable))
    return manifest


def read_run_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")
