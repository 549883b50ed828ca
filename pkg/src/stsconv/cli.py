"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad arguments, config, data or
checkpoint), 2 internal error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .audio_io import AudioError, FeatureFileError, ManifestError, load_timbre, load_wav, save_content_features
from .config import ConfigError, RunConfig, load_config
from .data import DataError, prepare_split, speech_streams, write_synthetic_corpus
from .dsp import DSPError, estimate_f0, griffin_lim, quantize_f0
from .metrics import MetricError
from .model import CheckpointError, ModelInputs, load_checkpoint
from .pipeline import evaluate_model, read_artifacts, write_artifacts
from .plots import export_plots, plot_losses, plot_report, write_curve_csv
from .train import train_model

log = logging.getLogger("stsconv")

USER_ERRORS = (ConfigError, ManifestError, DataError, CheckpointError, AudioError, FeatureFileError,
               DSPError, MetricError, FileNotFoundError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args, **overrides) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "preset", "desk"), **overrides)


def cmd_synth_data(args) -> int:
    splits = tuple(args.splits)
    if len(splits) != 3 or abs(sum(splits) - 1.0) > 1e-6 or min(splits) < 0:
        raise UsageError("--splits needs three non-negative fractions summing to 1")
    manifest = write_synthetic_corpus(args.out, args.n, args.seed, splits, args.speakers)
    print(f"wrote {args.n} synthetic pairs; manifest {manifest}")
    return 0


def cmd_extract(args) -> int:
    cfg = _config(args, manifest=args.manifest)
    if cfg.manifest is None:
        raise UsageError("no manifest given (--manifest, config file or STSCONV_MANIFEST)")
    utts = prepare_split(cfg.manifest, cfg, None if args.split == "all" else args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "split", "frames", "content_frames", "voiced_frames", "f0_source"])
        for u in utts:
            save_content_features(out / f"{u.id}.content.feat", u.speech_content)
            write_curve_csv(out / f"{u.id}.f0.csv", {"f0_hz": u.f0_hz, "bin": quantize_f0(u.f0_hz)})
            write_curve_csv(out / f"{u.id}.rhythm.csv", {"rhythm": u.rhythm})
            w.writerow([u.id, u.split, u.n_frames, u.speech_content.shape[0], int((u.f0_hz > 0).sum()),
                        u.f0_source])
    print(f"extracted {len(utts)} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = dict(manifest=args.manifest, out_dir=args.out, steps=args.steps, seed=args.seed, mode=args.mode)
    for flag in ("no_ra", "no_cm", "no_f0_skip"):
        if getattr(args, flag):
            overrides[flag] = True
    cfg = _config(args, **overrides)
    if cfg.manifest is None:
        raise UsageError("no manifest given (--manifest, config file or STSCONV_MANIFEST)")
    utts = prepare_split(cfg.manifest, cfg, "train")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())

    def progress(row):
        if row["step"] % max(1, args.print_every) == 0:
            print(f"step {row['step']:6d}  total {row['total']:.4f}  " +
                  "  ".join(f"{k} {row[k]:.4f}" for k in ("commit", "rhythm_ce", "attn", "mae", "ssim") if k in row),
                  flush=True)

    _, tlog = train_model(cfg, utts, out, progress=progress)
    plot_losses(tlog.rows, out / "losses.png")
    print(f"trained {cfg.steps} steps; final checkpoint {tlog.checkpoints[-1]}")
    return 0


def _target_f0(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".csv":
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "f0_hz" not in rows[0]:
            raise UsageError(f"{path}: expected a CSV with an f0_hz column")
        return np.array([float(r["f0_hz"]) for r in rows])
    return estimate_f0(load_wav(path))


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    content, rhythm = speech_streams(load_wav(args.speech, cfg.sample_rate), cfg)
    f0 = _target_f0(Path(args.target_f0))
    if f0.size == 0 or not (f0 > 0).any():
        raise UsageError("target F0 contour is empty or fully unvoiced")
    timbre = load_timbre(args.timbre_dir, args.speaker, cfg.timbre_dim).vector
    res = model.infer(ModelInputs("cli", content, quantize_f0(f0), timbre, source_rhythm=rhythm), args.seed)
    audio = None
    if args.audio:
        audio = griffin_lim(res.mel, cfg.griffin_lim_iters, cfg.sample_rate, model.stats)
    out = write_artifacts(args.out, res, model.stats, audio)
    write_curve_csv(out / "target_f0.csv", {"f0_hz": f0})
    print(f"wrote {len(res.mel)} frames to {out}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg.with_overrides(**({"manifest": args.manifest} if args.manifest else {}))
    if cfg.manifest is None:
        raise UsageError("no manifest given")
    utts = prepare_split(cfg.manifest, cfg, args.split)
    report, results = evaluate_model(model, utts, args.out, args.seed, args.gl_iters)
    out = Path(args.out)
    plot_report(report, out / "report.png")
    if args.artifacts:
        for uid, res in results.items():
            write_artifacts(out / "artifacts" / uid, res, model.stats)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k not in ("utterances",)}, indent=2))
    return 0


def cmd_export_plots(args) -> int:
    art = read_artifacts(args.artifacts)
    rhythm = None
    if args.rhythm_csv:
        with open(args.rhythm_csv) as fh:
            rhythm = np.array([float(r["rhythm"]) for r in csv.DictReader(fh)])
    written = export_plots(art, args.out, rhythm, png=not args.no_png)
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stsconv", description="Speech-to-singing conversion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--preset", default="desk", help="base preset (desk or paper)")

    s = sub.add_parser("synth-data", help="render a synthetic paired corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--speakers", type=int, default=3)
    s.add_argument("--splits", type=float, nargs=3, default=(0.8, 0.1, 0.1), metavar=("TRAIN", "VALID", "TEST"))
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("extract", help="extract content/F0/rhythm features for a manifest")
    with_config(s)
    s.add_argument("--manifest")
    s.add_argument("--split", default="all", choices=("all", "train", "valid", "test"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a model")
    with_config(s)
    s.add_argument("--manifest")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("paired", "zero_shot"))
    s.add_argument("--no-ra", action="store_true", help="replace the rhythm adaptor by source rhythm")
    s.add_argument("--no-cm", action="store_true", help="replace cross-modal alignment by linear stretching")
    s.add_argument("--no-f0-skip", action="store_true", help="drop the pitch skip connection in fusion")
    s.add_argument("--print-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="convert one speech clip to a target melody")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--speech", required=True)
    s.add_argument("--target-f0", required=True, help="CSV with an f0_hz column, or a WAV to estimate F0 from")
    s.add_argument("--speaker", default="spk0")
    s.add_argument("--timbre-dir", default=".", help="directory holding timbre/<speaker>.feat")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--audio", action="store_true", help="also render audio with Griffin-Lim")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="score a checkpoint on a manifest split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--split", default="test", choices=("train", "valid", "test"))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gl-iters", type=int)
    s.add_argument("--artifacts", action="store_true", help="also write per-utterance inference artifacts")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-plots", help="render inference artifacts to PGM/CSV/PNG")
    s.add_argument("--artifacts", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rhythm-csv", help="optional rhythm curve CSV to overlay")
    s.add_argument("--no-png", action="store_true")
    s.set_defaults(func=cmd_export_plots)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
