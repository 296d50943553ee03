"""Command line entry point: ``neurodec <stage> ...``.

Stages exchange files, so each one can be rerun or inspected on its own.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import (decoders, features, melfront, nn, preprocess, report, synthdata, vocoder)
from .io import (FormatError, MatrixContainer, load_checkpoint, read_events, read_matrix,
                 read_recording, read_wav, save_checkpoint, write_events, write_matrix,
                 write_recording, write_wav)

log = logging.getLogger("neurodec")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def design_choices(**overrides) -> dict:
    """Fixed choices a run depends on, recorded in every manifest."""
    d = {
        "preprocess_order": "select -> notch -> CAR -> crop",
        "channel_rule": "ECoG/sEEG, not flagged bad, non-zero variance",
        "notch": {"base_hz": preprocess.LINE_HZ, "q": preprocess.NOTCH_Q,
                  "harmonics": "all below Nyquist", "zero_phase": True},
        "features": {"win_s": features.WIN_S, "shift_s": features.SHIFT_S,
                     "band_hz": list(features.BAND_HZ), "bandpass_order": features.BAND_ORDER,
                     "filtering": "whole segment, zero-phase", "timestamps": "window centers"},
        "mel": melfront.default_params(),
        "lag_s": melfront.LAG_S,
        "pairing": "nearest mel center to t - lag, error <= half the larger frame period",
        "split": "contiguous 80/10/10, remainder to train",
        "scalers": {"fcdnn": ["minmax", "standard"], "cnn2d": ["standard", "standard"]},
        "cnn2d": {"context_frames": 11, "filters": [32, 64, 64], "kernel": [3, 3],
                  "pool": [2, 2], "dense": 512, "dropout": 0.2},
        "init": "glorot-uniform, zero bias",
        "early_stopping": {"patience": 5, "restore_best": True},
        "lr_plateau": {"factor": 0.5, "patience": 3, "min_lr": 1e-5, "models": ["cnn2d"]},
        "run_seeds": "base_seed + run_index",
        "vocoder": {"n_iter": 32, "momentum": 0.99, "peak": vocoder.PEAK},
    }
    d.update(overrides)
    return d


def _manifest(args, out: Path, seeded: bool = False, **extra) -> None:
    path = out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k != "func"}
    if not seeded:
        cfg.setdefault("seed", "unseeded")
    cfg.update(extra)
    report.write_run_manifest(cfg, report.environment_info(), design_choices(), path)


def _outdir(p) -> Path:
    out = Path(p)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{p} does not exist")
    return p


def _band(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"band must look like LOW:HIGH, got {text!r}") from None
    return lo, hi


def _onoff(text: str) -> bool:
    if text.lower() in ("on", "true", "1", "yes"):
        return True
    if text.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


# -- stages -----------------------------------------------------------------


def cmd_preprocess(args):
    rec = read_recording(_need(args.rec))
    track = read_events(_need(args.events))
    track.check_within(rec.duration_s)
    out = _outdir(args.out)
    segs = preprocess.preprocess(rec, track, args.label)
    index = []
    for i, (seg, t0) in enumerate(segs):
        name = f"seg{i:03d}.rec.json"
        write_recording(seg, out / name)
        index.append({"file": name, "t_start_s": t0, "duration_s": seg.duration_s})
    (out / "segments.json").write_text(json.dumps({"label": args.label, "segments": index},
                                                  indent=1))
    print(f"{len(segs)} '{args.label}' segments, {segs[0][0].n_channels if segs else 0} channels")
    _manifest(args, out)


def cmd_features(args):
    seg_dir = _need(args.seg)
    index = json.loads(_need(seg_dir / "segments.json").read_text())
    out = _outdir(args.out)
    entries = []
    for i, s in enumerate(index["segments"]):
        seg = read_recording(seg_dir / s["file"])
        if args.band[1] >= seg.sampling_rate_hz / 2:
            raise CliError(f"band edge {args.band[1]} Hz is not below Nyquist of {s['file']}")
        fm = features.extract_features(seg, s["t_start_s"], args.win, args.shift, args.band)
        name = f"feat{i:03d}.mat.json"
        write_matrix(fm.to_container(segment=i, t_start_s=s["t_start_s"],
                                     duration_s=s["duration_s"], win_s=args.win,
                                     shift_s=args.shift, band_hz=list(args.band)), out / name)
        entries.append({"file": name, "t_start_s": s["t_start_s"], "duration_s": s["duration_s"]})
    (out / "features.json").write_text(json.dumps({"segments": entries}, indent=1))
    print(f"{len(entries)} feature matrices")
    _manifest(args, out)


def cmd_mel(args):
    audio, fs = read_wav(_need(args.wav))
    if fs != melfront.AUDIO_FS:
        log.info("resampling stimulus from %g Hz to %d Hz", fs, melfront.AUDIO_FS)
        from .dsp import resample
        audio = resample(audio, fs, melfront.AUDIO_FS)
    mel = melfront.mel_spectrogram(audio, melfront.AUDIO_FS, args.log)
    out = _outdir(args.out)
    m = mel.to_container()
    write_matrix(MatrixContainer(m.data, m.frame_rate_hz, m.t0_s, {**m.meta, "lag_s": args.lag}),
                 out / "mel.mat.json")
    print(f"{mel.n_frames} mel frames")
    _manifest(args, out)


def _crop_mel(mel: melfront.MelSpectrogram, t0: float, dur: float) -> melfront.MelSpectrogram:
    t = np.asarray(mel.frame_times_s)
    sel = (t >= t0 - 1e-9) & (t < t0 + dur - 1e-9)
    return melfront.MelSpectrogram(mel.values[sel], t[sel], mel.params)


def cmd_align(args):
    feat_dir, mel_dir = _need(args.feats), _need(args.mel)
    index = json.loads(_need(feat_dir / "features.json").read_text())
    mc = read_matrix(_need(mel_dir / "mel.mat.json"))
    mel = melfront.MelSpectrogram.from_container(mc)
    if mel.values.shape[1] != mel.params["n_mels"] or mel.params["fs"] != melfront.AUDIO_FS:
        raise CliError("mel parameters do not match the front-end (80 bands at 22050 Hz)")
    lag = float(mc.meta.get("lag_s", melfront.LAG_S))
    feats, mels = [], []
    for s in index["segments"]:
        fm = features.FeatureMatrix.from_container(read_matrix(feat_dir / s["file"]))
        feats.append(fm)
        mels.append(_crop_mel(mel, s["t_start_s"], s["duration_s"]))
    if any(m.n_frames == 0 for m in mels):
        raise CliError("a feature segment lies outside the stimulus audio")
    d = melfront.align_pairs(mels, feats, lag)
    melfront.save_paired(d, _outdir(args.out))
    print(f"{len(d)} pairs from {len(feats)} segments (lag {lag:.3f} s)")
    _manifest(args, Path(args.out))


def cmd_train(args):
    d = melfront.load_paired(_need(args.paired))
    cfg = decoders.load_config(args.config and _need(args.config), model=args.model,
                               seed=args.seed)
    n_mels = d.meta.get("mel_params", {}).get("n_mels", melfront.N_MELS)
    if d.Y.shape[1] != n_mels or n_mels != melfront.N_MELS:
        raise CliError(f"paired targets have {d.Y.shape[1]} bands, expected {melfront.N_MELS}")
    splits = decoders.split_dataset(d)
    out = _outdir(args.out)
    summary = decoders.run_repeated(splits, cfg, args.runs)
    rows = []
    for i, ck in enumerate(summary.checkpoints):
        ck.config["mel_params"] = d.meta.get("mel_params", melfront.default_params())
        save_checkpoint(ck, out / f"run{i:02d}.ckpt.json")
        rows.extend(summary.histories[i].rows(i))
    best = summary.best_run
    save_checkpoint(summary.checkpoints[best], out / "best.ckpt.json")
    (out / "history.csv").write_text(report.history_csv(rows))
    subject = args.subject or d.meta.get("subject", "synthetic")
    table = report.results_table([{"subject": subject, "model": cfg.model,
                                   "histories": summary.histories,
                                   "test_mse": summary.test_mse}])
    (out / "results.csv").write_text(table)
    tr, _, te = splits
    oracle = synthdata.ols_oracle_mse(tr.X, tr.Y, te.X, te.Y)
    baseline = synthdata.mean_baseline_mse(tr.Y, te.Y)
    print(f"best val MSE {summary.best_val_mse:.6f} (run {best}, seed {summary.seeds[best]}); "
          f"test MSE {summary.test_mse[best]:.6f}; least-squares test MSE {oracle:.6f}; "
          f"mean-predictor test MSE {baseline:.6f}")
    _manifest(args, out, seeded=True, train_config=cfg.to_dict(), best_run=best,
              best_val_mse=summary.best_val_mse, test_mse=summary.test_mse[best],
              ols_test_mse=oracle, mean_baseline_test_mse=baseline)


def _select_split(d, name):
    if name == "all":
        return d
    names = ("train", "val", "test")
    if name not in names:
        raise CliError(f"split must be one of {names + ('all',)}")
    return decoders.split_dataset(d)[names.index(name)]


def _check_compatible(ckpt, d):
    n_ch = ckpt.config.get("n_channels")
    if n_ch is not None and d.X.shape[1] != n_ch:
        raise CliError(f"checkpoint expects {n_ch} channels, paired data has {d.X.shape[1]}")
    if d.Y.shape[1] != ckpt.layers[-1]["out"]:
        raise CliError(f"checkpoint predicts {ckpt.layers[-1]['out']} bands, "
                       f"paired data has {d.Y.shape[1]}")


def cmd_predict(args):
    ckpt = load_checkpoint(_need(args.ckpt))
    d = melfront.load_paired(_need(args.paired))
    _check_compatible(ckpt, d)
    part = _select_split(d, args.split)
    pred, _ = decoders.predict_rows(ckpt, part)
    params = ckpt.config.get("mel_params") or d.meta.get("mel_params") or melfront.default_params()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_matrix(MatrixContainer(pred, params["fs"] / params["hop_samples"], 0.0,
                                 {"kind": "mel", "params": params, "split": args.split}), out)
    print(f"{len(pred)} predicted frames")
    _manifest(args, out)


def cmd_synthesize(args):
    m = read_matrix(_need(args.mel))
    mel = melfront.MelSpectrogram.from_container(m)
    if mel.values.shape[1] != mel.params["n_mels"]:
        raise CliError(f"matrix has {mel.values.shape[1]} columns, params say {mel.params['n_mels']}")
    y = vocoder.mel_to_audio(mel, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_wav(y, mel.params["fs"], out)
    print(f"{len(y) / mel.params['fs']:.3f} s of audio")
    _manifest(args, out, seeded=True)


def cmd_evaluate(args):
    ckpt = load_checkpoint(_need(args.ckpt))
    d = melfront.load_paired(_need(args.paired))
    _check_compatible(ckpt, d)
    lines = ["split,n_samples,mse"]
    for name, part in zip(("train", "val", "test"), decoders.split_dataset(d)):
        mse = decoders.evaluate_mse(ckpt, part)
        lines.append(f"{name},{len(decoders.prepare_for(ckpt, part).inputs)},{mse:.6f}")
        print(f"{name} MSE {mse:.6f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    _manifest(args, out)


def cmd_render(args):
    m = read_matrix(_need(args.mat))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.render_spectrogram_image(m, out)
    _manifest(args, out)


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    if args.model == "fcdnn":
        model = decoders.build_fcdnn(args.channels, args.seed)
    else:
        model = decoders.build_cnn2d(args.channels, 11, args.seed)
    x = rng.standard_normal((args.batch,) + model.input_shape)
    y = rng.standard_normal((args.batch,) + model.output_shape)
    err = nn.grad_check(model, x, y, fraction=args.fraction, seed=args.seed)
    print(f"max relative error {err:.3e} over {model.n_parameters()} parameters "
          f"({args.fraction:.0%} sampled)")
    if err >= 1e-4:
        raise CliError(f"gradient check failed: {err:.3e} >= 1e-4")


def cmd_synthdata(args):
    sd = synthdata.generate(args.channels, args.duration, None, args.sigma, args.seed)
    out = _outdir(args.out)
    write_recording(sd.recording, out / "recording.rec.json")
    write_events(sd.track, out / "events.tsv")
    write_wav(sd.audio, sd.audio_fs, out / "stimulus.wav")
    write_matrix(MatrixContainer(sd.mixing, meta={"kind": "mixing"}), out / "mixing.mat.json")
    print(f"{sd.recording.n_channels} channels, {sd.recording.duration_s:.1f} s, "
          f"{len(sd.track)} blocks")
    _manifest(args, out, seeded=True)


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurodec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("preprocess", help="select channels, notch, CAR, crop speech blocks")
    s.add_argument("--rec", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--label", default="speech")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("features", help="windowed Hilbert-envelope features")
    s.add_argument("--seg", required=True)
    s.add_argument("--win", type=float, default=features.WIN_S)
    s.add_argument("--shift", type=float, default=features.SHIFT_S)
    s.add_argument("--band", type=_band, default=features.BAND_HZ)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("mel", help="mel spectrogram of the stimulus")
    s.add_argument("--wav", required=True)
    s.add_argument("--lag", type=float, default=melfront.LAG_S)
    s.add_argument("--log", type=_onoff, default=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mel)

    s = sub.add_parser("align", help="pair feature frames with lagged mel frames")
    s.add_argument("--feats", required=True)
    s.add_argument("--mel", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("train", help="train a decoder several times with derived seeds")
    s.add_argument("--paired", required=True)
    s.add_argument("--model", choices=decoders.MODELS, default="fcdnn")
    s.add_argument("--config")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--subject")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict mel frames for one split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--paired", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("synthesize", help="Griffin-Lim audio from a mel matrix")
    s.add_argument("--mel", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", help="standardized MSE per split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--paired", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="write a matrix as a PGM image")
    s.add_argument("--mat", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("gradcheck", help="compare backprop with central differences")
    s.add_argument("--model", choices=decoders.MODELS, default="fcdnn")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--fraction", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synthdata", help="generate a synthetic recording with a planted decoder")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--duration", type=float, default=390.0)
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthdata)
    return p


def _limit_threads():
    n = os.environ.get("NEURODEC_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    limits = _limit_threads()
    try:
        args.func(args)
    except (CliError, FormatError, ValueError, OSError, FloatingPointError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"neurodec {args.command}: error: {msg}", file=sys.stderr)
        return 1
    finally:
        if limits is not None:
            limits.unregister() if hasattr(limits, "unregister") else None
    return 0


if __name__ == "__main__":
    sys.exit(main())
