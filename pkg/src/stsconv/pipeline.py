"""Inference and evaluation runners plus on-disk inference artifacts."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, save_wav
from .config import RunConfig
from .data import Utterance, to_inputs
from .dsp import DSPError, MelStats, SpectralFrameSeq, estimate_f0, griffin_lim
from .metrics import EvalReport, MetricError, UtteranceScore, lsd, rca, rrd
from .model import InferenceResult, STSModel

__all__ = [
    "Scores",
    "score_prediction",
    "teacher_codes",
    "evaluate_model",
    "write_artifacts",
    "read_artifacts",
]


@dataclass
class Scores:
    lsd: float
    rca: float
    rrd: float
    pred_f0: np.ndarray


def _truncate(a: np.ndarray, b: np.ndarray):
    n = min(a.shape[0], b.shape[0])
    return a[:n], b[:n]


def score_prediction(pred01: np.ndarray, utt: Utterance, stats: MelStats, gl_iters: int = 64,
                     pred_f0: np.ndarray | None = None, cfg: RunConfig | None = None) -> Scores:
    """LSD, RCA and RRD of a normalised mel prediction against an utterance.

    Without ``pred_f0`` the F0 is re-estimated from a Griffin-Lim rendering of
    the predicted mel.  LSD is measured on the normalised log-mel scale.
    """
    cfg = cfg or RunConfig()
    ref01 = stats.normalize(utt.singing_log)
    p, r = _truncate(np.asarray(pred01, dtype=np.float64), ref01)
    score_lsd = lsd(p, r)
    if pred_f0 is None:
        audio = griffin_lim(SpectralFrameSeq(p, "normalized01"), gl_iters, cfg.sample_rate, stats)
        pred_f0 = estimate_f0(audio)
    pf, rf = _truncate(np.asarray(pred_f0, dtype=np.float64), utt.f0_hz)
    score_rca = rca(pf, rf)
    pred_lin = np.exp(stats.denormalize(p))
    score_rrd = rrd(pred_lin, utt.singing_linear, cfg.rhythm_beta, cfg.rhythm_epsilon, cfg.rhythm_sigma)
    return Scores(score_lsd, score_rca, score_rrd, pred_f0)


def teacher_codes(model: STSModel, utt: Utterance) -> np.ndarray:
    """VQ codes of the utterance's own singing rhythm (the predictor's training target)."""
    from . import tensor as tn

    with tn.no_grad():
        return model.codebook.nearest(model.encode_rhythm(utt.rhythm).data)


def evaluate_model(model: STSModel, utts: list[Utterance], out_dir=None, seed: int = 0,
                   gl_iters: int | None = None) -> tuple[EvalReport, dict]:
    """Run inference on every utterance and score it.

    Returns the report and the per-utterance inference results.  Utterances
    whose scoring fails are listed as skipped with the reason.
    """
    cfg = model.cfg
    gl_iters = gl_iters or cfg.griffin_lim_iters
    scores, skipped, results = [], [], {}
    for utt in utts:
        try:
            res = model.infer(to_inputs(utt, cfg), seed)
            s = score_prediction(res.mel.frames, utt, model.stats, gl_iters, cfg=cfg)
        except (DSPError, MetricError, ValueError) as exc:
            skipped.append((utt.id, str(exc)))
            continue
        acc = float(np.mean(res.rhythm_indices == teacher_codes(model, utt)))
        scores.append(UtteranceScore(utt.id, s.lsd, s.rca, s.rrd, acc))
        results[utt.id] = res
    report = EvalReport.from_scores(scores, skipped)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_json(out / "report.json")
        report.write_csv(out / "report.csv")
    return report, results


# ----------------------------------------------------------------------- artifacts


def write_artifacts(out_dir, res: InferenceResult, stats: MelStats, audio: AudioClip | None = None) -> Path:
    """Store an inference result as plain files (npy matrices, CSV codes, JSON index)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "mel.npy", res.mel.frames)
    with open(out / "rhythm_indices.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "code"])
        w.writerows((i, int(c)) for i, c in enumerate(res.rhythm_indices))
    for name, a in res.attentions.items():
        np.save(out / f"attention_{name}.npy", a)
    if audio is not None:
        save_wav(out / "audio.wav", audio)
    index = {
        "frames": len(res.mel),
        "n_mels": res.mel.n_bins,
        "attentions": sorted(res.attentions),
        "rhythm_source": res.rhythm_source,
        "mel_stats": [stats.log_min, stats.log_max],
        "audio": audio is not None,
    }
    (out / "artifacts.json").write_text(json.dumps(index, indent=2))
    return out


def read_artifacts(art_dir) -> dict:
    art = Path(art_dir)
    index_path = art / "artifacts.json"
    if not index_path.exists():
        raise FileNotFoundError(f"no inference artifacts in {art} (missing artifacts.json)")
    index = json.loads(index_path.read_text())
    out = {"index": index, "mel": np.load(art / "mel.npy"), "attentions": {}}
    for name in index["attentions"]:
        out["attentions"][name] = np.load(art / f"attention_{name}.npy")
    with open(art / "rhythm_indices.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    out["rhythm_indices"] = np.array([int(r[1]) for r in rows], dtype=np.int64)
    return out
