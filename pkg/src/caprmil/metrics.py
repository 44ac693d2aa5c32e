"""Slide-level evaluation metrics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError
from .numerics.tensor import no_grad


class Weighting(enum.Enum):
    NONE = "none"
    QUADRATIC = "quadratic"


def roc_auc(scores, labels) -> float:
    """Binary ROC AUC in the Mann-Whitney form (ties count one half).

    ``scores`` may also be an ``[n, C]`` probability matrix with integer
    ``labels``; the result is then the unweighted mean of the one-vs-rest
    AUCs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.ndim == 2:
        if scores.shape[1] == 2:
            return roc_auc(scores[:, 1], labels)
        return float(np.mean([roc_auc(scores[:, c], labels == c) for c in range(scores.shape[1])]))
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def adaptive_ece(confidences, predictions, labels, n_bins: int = 15) -> float:
    """Calibration error over equal-count confidence bins.

    Samples are sorted by confidence and split into ``n_bins`` bins whose sizes
    differ by at most one (the leading bins take the remainder).
    """
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(predictions) == np.asarray(labels)
    if n_bins < 1 or n_bins > conf.size:
        raise ConfigError(f"n_bins={n_bins} must lie in [1, n_samples={conf.size}]")
    order = np.argsort(conf, kind="stable")
    gaps = [abs(correct[b].mean() - conf[b].mean()) for b in np.array_split(order, n_bins)]
    return float(np.mean(gaps))


def confusion_matrix(preds, labels, n_classes: int | None = None) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.size == 0:
        raise ConfigError("preds and labels must be non-empty and of equal length")
    k = n_classes or int(max(preds.max(), labels.max())) + 1
    out = np.zeros((k, k), dtype=np.float64)
    np.add.at(out, (labels, preds), 1.0)
    return out


def cohen_kappa(preds, labels, weighting: Weighting | str = Weighting.NONE,
                n_classes: int | None = None) -> float:
    """Chance-corrected agreement ``1 - sum(w*O) / sum(w*E)``."""
    weighting = Weighting(weighting)
    observed = confusion_matrix(preds, labels, n_classes)
    k = observed.shape[0]
    observed /= observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    i, j = np.indices((k, k))
    if weighting is Weighting.QUADRATIC:
        w = (i - j) ** 2 / max(k - 1, 1) ** 2
    else:
        w = (i != j).astype(np.float64)
    denom = (w * expected).sum()
    if denom <= 0:
        raise UndefinedMetricError("kappa is undefined when both raters use a single identical class")
    return float(1.0 - (w * observed).sum() / denom)


def balanced_accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    recalls = [(preds[labels == c] == c).mean() for c in np.unique(labels)]
    return float(np.mean(recalls))


@dataclass
class EvalResult:
    auc: float
    ace: float
    kappa: float
    qw_kappa: float
    balanced_accuracy: float
    n_samples: int
    class_counts: dict = field(default_factory=dict)
    loss: float = float("nan")

    KEYS = ("auc", "ace", "kappa", "qw_kappa", "balanced_accuracy", "n_samples")

    def record(self) -> str:
        """Single machine-readable line with a fixed key order."""
        parts = []
        for k in self.KEYS:
            v = getattr(self, k)
            parts.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.6f}")
        return " ".join(parts)

    def table(self) -> str:
        rows = [("metric", "value")]
        for k in self.KEYS:
            v = getattr(self, k)
            rows.append((k, str(v) if isinstance(v, int) else f"{v:.4f}"))
        width = max(len(r[0]) for r in rows)
        lines = [f"{a:<{width}}  {b}" for a, b in rows]
        lines.insert(1, "-" * (width + 10))
        return "\n".join(lines)


def _safe(fn, *args, **kwargs) -> float:
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return math.nan


def summarize_predictions(probs: np.ndarray, labels, n_bins: int = 15) -> EvalResult:
    """All slide-level metrics from class probabilities ``[n, C]``.

    Metrics that are undefined for the sample (e.g. AUC with one class
    present) are reported as NaN.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = probs.shape
    preds = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    return EvalResult(
        auc=_safe(roc_auc, probs, labels),
        ace=adaptive_ece(conf, preds, labels, min(n_bins, n)),
        kappa=_safe(cohen_kappa, preds, labels, Weighting.NONE, n_classes),
        qw_kappa=_safe(cohen_kappa, preds, labels, Weighting.QUADRATIC, n_classes),
        balanced_accuracy=balanced_accuracy(preds, labels),
        n_samples=int(n),
        class_counts={int(c): int((labels == c).sum()) for c in np.unique(labels)},
    )


def predict_proba(state, bags: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class probabilities and labels for every bag."""
    from .model import forward

    probs, labels = [], []
    with no_grad():
        for bag in bags:
            logits, _ = forward(bag.features, state, training=False)
            z = logits.data[0].astype(np.float64)
            z = np.exp(z - z.max())
            probs.append(z / z.sum())
            labels.append(bag.label)
    return np.array(probs), np.array(labels, dtype=np.int64)


def evaluate(state, bags: Sequence, n_bins: int = 15) -> EvalResult:
    if len(bags) == 0:
        raise ConfigError("cannot evaluate an empty split")
    probs, labels = predict_proba(state, bags)
    result = summarize_predictions(probs, labels, n_bins)
    picked = np.clip(probs[np.arange(labels.size), labels], 1e-300, None)
    result.loss = float(-np.log(picked).mean())
    return result
