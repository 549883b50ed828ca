"""Training loop: per-utterance graphs, gradient accumulation, Adam, EMA codebook."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Utterance, corpus_stats, to_inputs
from .model import LOSS_NAMES, STSModel, save_checkpoint
from .nn import Adam

__all__ = ["TrainLog", "train_model", "write_loss_csv"]

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts: step, <loss names>, total, grad_norm
    checkpoints: list = field(default_factory=list)

    def series(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=np.float64)


def write_loss_csv(path, tlog: TrainLog) -> None:
    cols = ["step", *LOSS_NAMES, "total", "grad_norm"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in tlog.rows:
            w.writerow([r["step"]] + [repr(r[c]) if c in r else "" for c in cols[1:]])


def train_model(cfg: RunConfig, utts: list[Utterance], out_dir=None, model: STSModel | None = None,
                progress=None) -> tuple[STSModel, TrainLog]:
    """Train on ``utts`` for ``cfg.steps`` optimiser steps.

    Each step draws ``cfg.batch_size`` utterances (shuffled epochs), builds one
    graph per utterance and accumulates the batch-mean gradient.  Logged losses
    are batch means of the weighted terms; ``total`` is their sum.
    """
    if not utts:
        raise ValueError("no training utterances")
    model = model or STSModel(cfg)
    model.train()
    rng = np.random.default_rng([cfg.seed, 1])
    if model.stats is None:
        model.stats = corpus_stats(utts)
    inputs = [to_inputs(u, cfg, model.stats) for u in utts]
    if not model.codebook.initialized:
        model.init_codebook([x.rhythm for x in inputs], rng)
    opt = Adam(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    tlog = TrainLog()
    order: list[int] = []
    B = min(cfg.batch_size, len(inputs))
    for _ in range(cfg.steps):
        model.step += 1
        model.codebook.frozen = model.step > cfg.vq_freeze_step
        batch = []
        while len(batch) < B:
            if not order:
                order = list(rng.permutation(len(inputs)))
            batch.append(order.pop(0))
        opt.zero_grad()
        sums: dict = {}
        z_all, idx_all = [], []
        for i in batch:
            lt = model.loss_terms(inputs[i], rng)
            (lt.total * (1.0 / B)).backward()
            for k, v in lt.values().items():
                sums[k] = sums.get(k, 0.0) + v / B
            z_all.append(lt.z_e)
            idx_all.append(lt.codes)
        norm = opt.step()
        model.codebook.ema_update(np.concatenate(z_all), np.concatenate(idx_all))
        row = {"step": model.step, **sums, "grad_norm": norm}
        tlog.rows.append(row)
        if not np.isfinite(sums["total"]):
            raise FloatingPointError(f"non-finite loss at step {model.step}")
        if progress is not None and model.step % cfg.log_every == 0:
            progress(row)
        if out is not None and cfg.checkpoint_every and model.step % cfg.checkpoint_every == 0:
            p = out / f"ckpt_{model.step:07d}.bin"
            save_checkpoint(p, model)
            tlog.checkpoints.append(p)
            log.info("step %d: total %.4f, checkpoint %s", model.step, sums["total"], p)
    if out is not None:
        p = out / "ckpt_final.bin"
        save_checkpoint(p, model)
        tlog.checkpoints.append(p)
        write_loss_csv(out / "losses.csv", tlog)
    return model, tlog
