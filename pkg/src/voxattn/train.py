"""Training runs: seeded epoch loop, per-epoch log, checkpoints, k-fold driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import ModelParams, NetworkConfig, build_network
from .checkpoint import save_checkpoint
from .data import VolumeSample, iterate_batches
from .metrics import MetricsReport, evaluate
from .optim import AdamState, EpochSummary, TrainConfig, cosine_lr, train_epoch

log = logging.getLogger(__name__)


def fit(params: ModelParams, samples: Sequence[VolumeSample], cfg: TrainConfig,
        log_path=None, checkpoint_dir=None) -> list[EpochSummary]:
    """Train in place.  Data order and augmentation draw from one generator seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.create(params.parameters())
    history = []
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
            batches = iterate_batches(samples, cfg.batch_size, rng, cfg.augment)
            summary = train_epoch(params, state, batches, lr, epoch)
            history.append(summary)
            log.info("epoch %d loss %.4f acc %.4f lr %.2e", epoch, summary.mean_loss, summary.accuracy, lr)
            if log_fh:
                log_fh.write(summary.to_json() + "\n")
                log_fh.flush()
            if checkpoint_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(params, Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    return history


@dataclass
class FoldResult:
    fold: Optional[int]
    report: MetricsReport
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train_and_evaluate(net_cfg: NetworkConfig, train_cfg: TrainConfig, train: Sequence[VolumeSample],
                       test: Sequence[VolumeSample], out_dir=None, fold: Optional[int] = None,
                       eval_batch: int = 4) -> FoldResult:
    params = build_network(net_cfg, seed=train_cfg.seed)
    tag = "single" if fold is None else f"fold{fold}"
    log_path = ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"{tag}_epochs.jsonl"
        log_path.unlink(missing_ok=True)
    history = fit(params, train, train_cfg, log_path, out_dir)
    if out_dir is not None:
        ckpt = out_dir / f"{tag}.ckpt"
        save_checkpoint(params, ckpt)
    return FoldResult(fold, evaluate(params, test, eval_batch), history, ckpt)


def summarize_folds(results: Sequence[FoldResult]) -> dict:
    """Mean and (population) standard deviation of each defined metric across folds."""
    out = {}
    for key in MetricsReport.FIELDS:
        vals = [getattr(r.report, key) for r in results if getattr(r.report, key) is not None]
        if vals:
            out[key] = (float(np.mean(vals)), float(np.std(vals)))
    return out
