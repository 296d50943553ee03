"""Fc-DNN and 2D-CNN mel decoders: scaling, splitting, training and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .io import ModelCheckpoint
from .melfront import PairedDataset

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MODELS = ("fcdnn", "cnn2d")


# -- scalers ----------------------------------------------------------------


@dataclass
class ScalerParams:
    kind: str  # "minmax" or "standard"
    offset: np.ndarray  # column min or mean
    scale: np.ndarray  # column range or std, floored
    fitted_on: str = "train"

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.offset) / self.scale

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"kind": self.kind, "offset": self.offset.tolist(), "scale": self.scale.tolist(),
                "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(d["kind"], np.asarray(d["offset"], dtype=np.float64),
                   np.asarray(d["scale"], dtype=np.float64), d.get("fitted_on", "train"))


def fit_scaler(kind: str, X, fitted_on: str = "train") -> ScalerParams:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("scaler needs a non-empty 2-D array")
    if kind == "minmax":
        lo = X.min(axis=0)
        return ScalerParams(kind, lo, np.maximum(X.max(axis=0) - lo, SCALE_FLOOR), fitted_on)
    if kind == "standard":
        return ScalerParams(kind, X.mean(axis=0), np.maximum(X.std(axis=0), SCALE_FLOOR), fitted_on)
    raise ValueError(f"unknown scaler kind {kind!r}")


# -- splits and windows -----------------------------------------------------


def split_sizes(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three numbers summing to 1, got {fractions}")
    n_val = int(math.floor(n * fractions[1]))
    n_test = int(math.floor(n * fractions[2]))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} rows cannot fill all three splits")
    return n_train, n_val, n_test


def split_dataset(d: PairedDataset, fractions=SPLIT_FRACTIONS):
    """Contiguous time-ordered train/val/test split; rounding leftovers go to train."""
    n_train, n_val, _ = split_sizes(len(d), fractions)
    return (d.rows(slice(0, n_train)), d.rows(slice(n_train, n_train + n_val)),
            d.rows(slice(n_train + n_val, len(d))))


def _runs(segment_ids: np.ndarray):
    """(start, stop) of each maximal run of equal segment ids."""
    if len(segment_ids) == 0:
        return []
    cut = np.flatnonzero(np.diff(segment_ids) != 0) + 1
    edges = np.concatenate([[0], cut, [len(segment_ids)]])
    return list(zip(edges[:-1], edges[1:]))


def context_centers(segment_ids: np.ndarray, k: int) -> np.ndarray:
    """Row indices that have k//2 neighbours on both sides inside their own segment run."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"context size must be a positive odd number, got {k}")
    h = k // 2
    centers = [np.arange(a + h, b - h) for a, b in _runs(np.asarray(segment_ids))]
    return np.concatenate(centers).astype(np.int64) if centers else np.zeros(0, np.int64)


def make_context_windows(X, segment_ids, k: int, centers=None) -> np.ndarray:
    """Stack k-frame windows around each center as [n, k, n_channels, 1] images."""
    X = np.asarray(X)
    if centers is None:
        centers = context_centers(segment_ids, k)
    h = k // 2
    idx = centers[:, None] + np.arange(-h, h + 1)[None, :]
    return X[idx][..., None]


# -- architectures ----------------------------------------------------------


def fcdnn_specs(n_channels: int, hidden: int = 3000, n_out: int = 80) -> list[dict]:
    return [
        {"type": "dense", "in": n_channels, "out": hidden, "activation": "relu"},
        {"type": "dense", "in": hidden, "out": n_out, "activation": "linear"},
    ]


def cnn2d_specs(n_channels: int, k: int = 11, n_out: int = 80, filters=(32, 64, 64),
                dense: int = 512, dropout: float = 0.2) -> list[dict]:
    specs, in_ch = [], 1
    for f in filters:
        specs.append({"type": "conv2d", "in_ch": in_ch, "out_ch": f, "kh": 3, "kw": 3,
                      "padding": "same", "stride": 1, "activation": "swish"})
        specs.append({"type": "dropout", "rate": dropout})
        in_ch = f
    flat = (k // 2) * (n_channels // 2) * in_ch
    specs += [
        {"type": "maxpool2d", "ph": 2, "pw": 2},
        {"type": "flatten"},
        {"type": "dense", "in": flat, "out": dense, "activation": "swish"},
        {"type": "dense", "in": dense, "out": n_out, "activation": "linear"},
    ]
    return specs


def build_fcdnn(n_channels: int, seed: int = 0, dtype=np.float32) -> nn.Model:
    return nn.Model.from_specs(fcdnn_specs(n_channels), (n_channels,), seed, dtype)


def build_cnn2d(n_channels: int, k: int = 11, seed: int = 0, dtype=np.float32) -> nn.Model:
    if n_channels < 2 or k < 2:
        raise ValueError("the 2x2 pooling needs at least 2 channels and 2 context frames")
    return nn.Model.from_specs(cnn2d_specs(n_channels, k), (k, n_channels, 1), seed, dtype)


# -- configuration ----------------------------------------------------------


@dataclass
class TrainConfig:
    model: str = "fcdnn"
    max_epochs: int = 50
    batch_size: int = 32
    patience: int = 5
    lr: float = 1e-3
    lr_schedule: bool = False
    lr_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-5
    seed: int = 7
    context_frames: int = 11

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.model!r}")
        for name in ("max_epochs", "batch_size", "patience", "lr_patience", "context_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.context_frames % 2 == 0:
            raise ValueError("context_frames must be odd")

    @classmethod
    def for_model(cls, model: str, **overrides) -> "TrainConfig":
        if model == "cnn2d":
            base = dict(model="cnn2d", max_epochs=100, batch_size=128, lr_schedule=True)
        else:
            base = dict(model=model)
        return cls(**{**base, **overrides})

    @property
    def input_scaler(self) -> str:
        return "minmax" if self.model == "fcdnn" else "standard"

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path, **overrides) -> TrainConfig:
    """Read a JSON training config; keys not given fall back to the model's defaults."""
    data = json.loads(Path(path).read_text()) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    model = data.pop("model", "fcdnn")
    return TrainConfig.for_model(model, **data)


# -- training ---------------------------------------------------------------


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = math.inf
    stopped_early: bool = False

    @property
    def best_train_loss(self) -> float:
        return min(self.train_loss) if self.train_loss else math.nan

    def rows(self, run: int = 0):
        for e, (tl, vm) in enumerate(zip(self.train_loss, self.val_mse)):
            yield {"run": run, "epoch": e, "train_loss": tl, "val_mse": vm}


class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.wait = 0
        self.epoch = -1

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, self.epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, factor: float, patience: int, min_lr: float):
        self.lr, self.factor, self.patience, self.min_lr = lr, factor, patience, min_lr
        self.best = math.inf
        self.wait = 0

    def update(self, value: float) -> float:
        if value < self.best:
            self.best, self.wait = value, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.wait = 0
        return self.lr


@dataclass
class Prepared:
    """Model-ready arrays for one split, in scaled space."""

    inputs: np.ndarray
    targets: np.ndarray
    rows: np.ndarray  # rows of the source split each sample corresponds to


def prepare(d: PairedDataset, x_scaler: ScalerParams, y_scaler: ScalerParams,
            model: str, k: int) -> Prepared:
    Xs = x_scaler.apply(d.X).astype(np.float32)
    Ys = y_scaler.apply(d.Y).astype(np.float32)
    if model == "fcdnn":
        return Prepared(Xs, Ys, np.arange(len(d)))
    centers = context_centers(d.segment_ids, k)
    return Prepared(make_context_windows(Xs, d.segment_ids, k, centers), Ys[centers], centers)


def _forward_batches(model: nn.Model, inputs, batch: int = 1024) -> np.ndarray:
    outs = [model.forward(inputs[s:s + batch]) for s in range(0, len(inputs), batch)]
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape, model.dtype)


def scaled_mse(model: nn.Model, data: Prepared) -> float:
    pred = _forward_batches(model, data.inputs)
    diff = pred.astype(np.float64) - data.targets
    return float(np.mean(diff * diff))


def build_model(cfg: TrainConfig, n_channels: int, seed: int | None = None) -> nn.Model:
    seed = cfg.seed if seed is None else seed
    if cfg.model == "fcdnn":
        return build_fcdnn(n_channels, seed)
    return build_cnn2d(n_channels, cfg.context_frames, seed)


def _streams(seed: int):
    init, shuffle, dropout = np.random.SeedSequence(seed).spawn(3)
    return (int(init.generate_state(1)[0]), np.random.default_rng(shuffle),
            np.random.default_rng(dropout))


def train(model: nn.Model | None, splits, cfg: TrainConfig):
    """Fit one decoder; returns (checkpoint of the best epoch, history).

    Scalers are fitted on the training split only. Validation MSE is measured in
    the standardized target space after every epoch.
    """
    train_d, val_d = splits[0], splits[1]
    if len(train_d) == 0 or len(val_d) == 0:
        raise ValueError("train and validation splits must be non-empty")
    n_channels = train_d.X.shape[1]
    init_seed, shuffle_rng, dropout_rng = _streams(cfg.seed)
    if model is None:
        model = build_model(cfg, n_channels, init_seed)
    x_scaler = fit_scaler(cfg.input_scaler, train_d.X)
    y_scaler = fit_scaler("standard", train_d.Y)
    tr = prepare(train_d, x_scaler, y_scaler, cfg.model, cfg.context_frames)
    va = prepare(val_d, x_scaler, y_scaler, cfg.model, cfg.context_frames)
    if len(tr.inputs) == 0 or len(va.inputs) == 0:
        raise ValueError("a split has no usable samples (segments shorter than the context?)")

    opt = nn.Adam(model.parameters(), lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    schedule = PlateauSchedule(cfg.lr, cfg.lr_factor, cfg.lr_patience, cfg.min_lr)
    hist = TrainHistory()
    best_weights = model.get_weights()
    n = len(tr.inputs)
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            pred = model.forward(tr.inputs[idx], training=True, rng=dropout_rng)
            loss, grad = nn.mse_loss(pred, tr.targets[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch starting {s}")
            model.backward(grad)
            opt.step(model.gradients())
            total += loss * len(idx)
        val = scaled_mse(model, va)
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite validation MSE at epoch {epoch}")
        hist.train_loss.append(total / n)
        hist.val_mse.append(val)
        hist.lr.append(opt.lr)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, total / n, val, opt.lr)
        stop = stopper.update(val)
        if stopper.best_epoch == epoch:
            best_weights = model.get_weights()
        if cfg.lr_schedule:
            opt.lr = schedule.update(val)
        if stop:
            hist.stopped_early = True
            break
    hist.best_epoch, hist.best_val_mse = stopper.best_epoch, stopper.best
    model.set_weights(best_weights)
    ckpt = ModelCheckpoint(
        layers=model.specs(),
        weights=model.get_weights(),
        scalers={"input": x_scaler.to_dict(), "target": y_scaler.to_dict()},
        config={**cfg.to_dict(), "input_shape": list(model.input_shape),
                "n_channels": n_channels},
        rng_seed=cfg.seed,
    )
    return ckpt, hist


# -- inference --------------------------------------------------------------


def model_from_checkpoint(ckpt: ModelCheckpoint) -> nn.Model:
    m = nn.Model.from_specs(ckpt.layers, tuple(ckpt.config["input_shape"]), 0, np.float32)
    m.set_weights(ckpt.weights)
    return m


def _scalers(ckpt: ModelCheckpoint):
    return (ScalerParams.from_dict(ckpt.scalers["input"]),
            ScalerParams.from_dict(ckpt.scalers["target"]))


def prepare_for(ckpt: ModelCheckpoint, d: PairedDataset) -> Prepared:
    xs, ys = _scalers(ckpt)
    return prepare(d, xs, ys, ckpt.config["model"], ckpt.config.get("context_frames", 1))


def predict(ckpt: ModelCheckpoint, X, segment_ids=None) -> np.ndarray:
    """Mel frames in the original target scale.

    For the CNN, only frames with a full context window inside their segment are
    predicted; use :func:`predict_rows` to learn which ones.
    """
    X = np.asarray(X, dtype=np.float64)
    if segment_ids is None:
        segment_ids = np.zeros(len(X), dtype=np.int64)
    n_out = ckpt.layers[-1]["out"]
    d = PairedDataset(X, np.zeros((len(X), n_out)), np.asarray(segment_ids))
    pred, _ = predict_rows(ckpt, d)
    return pred


def predict_rows(ckpt: ModelCheckpoint, d: PairedDataset):
    """(predictions in original scale, source row index of each prediction)."""
    p = prepare_for(ckpt, d)
    model = model_from_checkpoint(ckpt)
    out = _forward_batches(model, p.inputs).astype(np.float64)
    return _scalers(ckpt)[1].invert(out), p.rows


def evaluate_mse(ckpt: ModelCheckpoint, d: PairedDataset) -> float:
    """MSE in the standardized target space (training-set statistics)."""
    p = prepare_for(ckpt, d)
    if len(p.inputs) == 0:
        raise ValueError("nothing to evaluate")
    return scaled_mse(model_from_checkpoint(ckpt), p)


# -- repeated runs ----------------------------------------------------------


@dataclass
class RunSummary:
    histories: list[TrainHistory]
    checkpoints: list[ModelCheckpoint]
    test_mse: list[float]
    seeds: list[int]

    @property
    def best_run(self) -> int:
        return int(np.argmin([h.best_val_mse for h in self.histories]))

    @property
    def best_val_mse(self) -> float:
        return min(h.best_val_mse for h in self.histories)

    def rows(self):
        for i, (h, t, s) in enumerate(zip(self.histories, self.test_mse, self.seeds)):
            yield {"run": i, "seed": s, "best_epoch": h.best_epoch,
                   "best_train_loss": h.best_train_loss, "best_val_mse": h.best_val_mse,
                   "test_mse": t}


def run_repeated(splits, cfg: TrainConfig, n_runs: int = 10) -> RunSummary:
    """Train ``n_runs`` times with seeds cfg.seed + 0 .. n_runs - 1."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    hists, ckpts, tests, seeds = [], [], [], []
    for i in range(n_runs):
        run_cfg = replace(cfg, seed=cfg.seed + i)
        ckpt, hist = train(None, splits, run_cfg)
        hists.append(hist)
        ckpts.append(ckpt)
        tests.append(evaluate_mse(ckpt, splits[2]) if len(splits) > 2 else math.nan)
        seeds.append(run_cfg.seed)
    return RunSummary(hists, ckpts, tests, seeds)
