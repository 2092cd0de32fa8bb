"""Per-frame anomaly scores from reconstruction error, thresholds and frame-level metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DimensionError, DomainError
from .optimize import bce_per_sample

SCORE_HEADER = ["clip", "frame", "raw_error", "normalized_score", "label", "prediction"]


@dataclass(frozen=True)
class FrameScore:
    clip_id: str
    frame: int
    raw_error: float
    normalized_score: float


@dataclass
class EvalReport:
    threshold: float
    accuracy: float
    precision: float
    recall: float
    auc: float | None  # None when only one class is present
    eer: float | None
    n_frames: int
    n_anomalous: int
    traces: dict[str, np.ndarray] = field(default_factory=dict)


def normalize_scores(raw) -> np.ndarray:
    """Min-max rescale to [0, 1]; a set of identical errors maps to 0.5."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def reconstruction_errors(model, frames, batch_size=32) -> np.ndarray:
    """Mean BCE between each frame and its reconstruction."""
    out = []
    for i in range(0, len(frames), batch_size):
        chunk = np.asarray(frames[i:i + batch_size])
        out.append(bce_per_sample(chunk, model.forward(chunk)))
    return np.concatenate(out)


def score_frames(model, clips, batch_size=32) -> list[FrameScore]:
    if not clips:
        raise DomainError("no clips to score")
    raw = [reconstruction_errors(model, clip.frames, batch_size) for clip in clips]
    norm = normalize_scores(np.concatenate(raw))
    scores, k = [], 0
    for clip, errs in zip(clips, raw):
        for t, e in enumerate(errs):
            scores.append(FrameScore(clip.clip_id, t, float(e), float(norm[k])))
            k += 1
    return scores


def fit_threshold(val_scores, quantile=0.99) -> float:
    """Quantile of normal validation scores, linearly interpolated between order statistics."""
    val_scores = np.asarray(val_scores, dtype=np.float64)
    if val_scores.size == 0:
        raise DomainError("cannot fit a threshold on an empty score set")
    if not 0 <= quantile <= 1:
        raise DomainError("quantile must lie in [0, 1]")
    return float(np.quantile(val_scores, quantile, method="linear"))


def roc_auc(scores, labels) -> float | None:
    """Mann-Whitney AUC with tied pairs counted as one half; None for a single class."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """(fpr, tpr) points from (0, 0) to (1, 1), one per distinct score."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~y).sum(), 1)]
    return fpr, tpr


def equal_error_rate(scores, labels) -> float | None:
    """Point on the piecewise-linear ROC where FPR == FNR."""
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        return None
    fpr, tpr = roc_curve(scores, labels)
    d = fpr + tpr - 1  # fpr - fnr, non-decreasing along the curve
    i = int(np.argmax(d >= 0))
    if d[i] == 0 or i == 0:
        return float(fpr[i])
    t = -d[i - 1] / (d[i] - d[i - 1])
    return float(fpr[i - 1] + t * (fpr[i] - fpr[i - 1]))


def evaluate(scores, labels, threshold) -> EvalReport:
    """Frame-level metrics; a frame is flagged when its score exceeds ``threshold``.

    ``scores`` may be FrameScore objects (normalized scores are used, and
    per-clip traces are kept) or plain numbers.
    """
    traces = {}
    if len(scores) and isinstance(scores[0], FrameScore):
        for fs in scores:
            traces.setdefault(fs.clip_id, []).append(fs.normalized_score)
        traces = {k: np.asarray(v) for k, v in traces.items()}
        values = np.array([fs.normalized_score for fs in scores])
    else:
        values = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if values.shape != labels.shape:
        raise DimensionError(f"{values.size} scores vs {labels.size} labels")
    if values.size == 0:
        raise DomainError("nothing to evaluate")
    pred = values > threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return EvalReport(
        threshold=float(threshold),
        accuracy=float(np.mean(pred == truth)),
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        auc=roc_auc(values, truth),
        eer=equal_error_rate(values, truth),
        n_frames=int(values.size),
        n_anomalous=int(truth.sum()),
        traces=traces,
    )


def write_score_rows(fh, scores, labels=None, threshold=None):
    """Write the scores CSV to an open text file; label/prediction stay empty when unknown."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(SCORE_HEADER)
    for i, fs in enumerate(scores):
        label = "" if labels is None else int(labels[i])
        pred = "" if threshold is None else int(fs.normalized_score > threshold)
        writer.writerow([fs.clip_id, fs.frame, repr(fs.raw_error), repr(fs.normalized_score), label, pred])


def write_scores_csv(path, scores, labels=None, threshold=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        write_score_rows(fh, scores, labels, threshold)


def read_scores_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_HEADER:
            raise DomainError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)
