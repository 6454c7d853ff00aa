"""COVID-vs-rest metrics and batched prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .backbone import ModelParams, network_forward
from .data import COVID, VolumeSample, iterate_batches
from .errors import InputError
from .tensor import Tensor


class UndefinedMetricError(InputError):
    """A metric has an empty denominator for the given labels."""


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as 1/2.

    Computed from integer pair counts so it is exact, not merely close.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise InputError(f"scores {scores.shape} and labels {labels.shape} differ in length")
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    twice = int((2 * below + (upto - below)).sum())
    return twice / (2 * pos.size * neg.size)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]
    f1: Optional[float]
    auc: Optional[float]

    FIELDS = ("accuracy", "sensitivity", "specificity", "f1", "auc")

    def as_text(self) -> str:
        lines = [f"{k}: {_fmt(getattr(self, k))}" for k in self.FIELDS]
        lines += [f"{k}: {getattr(self, k)}" for k in ("tp", "fp", "tn", "fn", "n")]
        return "\n".join(lines)

    def csv_header(self) -> str:
        return ",".join(self.FIELDS + ("tp", "fp", "tn", "fn", "n"))

    def csv_line(self) -> str:
        vals = [_fmt(getattr(self, k), "") for k in self.FIELDS]
        vals += [str(getattr(self, k)) for k in ("tp", "fp", "tn", "fn", "n")]
        return ",".join(vals)

    def to_dict(self) -> dict:
        return asdict(self)


def _fmt(v, undefined: str = "undefined") -> str:
    return undefined if v is None else f"{v:.4f}"


def compute_metrics(predictions, scores, labels, positive: int = COVID) -> MetricsReport:
    """Three-class accuracy plus binary scores with ``positive`` against the other classes."""
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not (predictions.shape == scores.shape == labels.shape) or predictions.ndim != 1:
        raise InputError(
            f"predictions, scores and labels must be equal-length vectors, got "
            f"{predictions.shape}, {scores.shape}, {labels.shape}"
        )
    if labels.size == 0:
        raise InputError("need at least one sample")
    if np.any(scores < 0) or np.any(scores > 1):
        raise InputError("scores must be probabilities in [0, 1]")
    truth = labels == positive
    called = predictions == positive
    tp = int(np.sum(truth & called))
    fp = int(np.sum(~truth & called))
    tn = int(np.sum(~truth & ~called))
    fn = int(np.sum(truth & ~called))
    try:
        auc = roc_auc(scores, truth)
    except UndefinedMetricError:
        auc = None
    return MetricsReport(
        tp, fp, tn, fn, int(labels.size),
        accuracy=float(np.mean(predictions == labels)),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        auc=auc,
    )


def predict(params: ModelParams, samples: Sequence[VolumeSample], batch_size: int = 4):
    """Eval-mode class predictions and softmax probabilities, shape (N,) and (N, K)."""
    probs = []
    for x, _ in iterate_batches(samples, batch_size):
        logits, _ = network_forward(params, Tensor(x), training=False)
        probs.append(softmax(logits.data.astype(np.float64), axis=1))
    probs = np.concatenate(probs)
    return probs.argmax(axis=1), probs


def evaluate(params: ModelParams, samples: Sequence[VolumeSample], batch_size: int = 4) -> MetricsReport:
    preds, probs = predict(params, samples, batch_size)
    labels = np.array([s.label for s in samples])
    return compute_metrics(preds, probs[:, COVID], labels)
