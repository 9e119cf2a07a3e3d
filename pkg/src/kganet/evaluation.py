"""Test-set metrics and attention analysis.

Thresholds are chosen by Youden's J on the evaluated set itself. That is a
reporting convention for comparing configurations, not a deployable
calibration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import UndefinedMetricError
from .losses import ClassCenters, distances_to_center
from .model import KGANet


@dataclass
class MetricsReport:
    auc: float
    acc: float
    sensitivity: float
    specificity: float
    youden_threshold: float
    n_pos: int
    n_neg: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


@dataclass
class AttentionRecord:
    video_id: int
    weights: np.ndarray
    distances: np.ndarray
    keyframe_mask: np.ndarray

    def __post_init__(self):
        if not len(self.weights) == len(self.distances) == len(self.keyframe_mask):
            raise ValueError("attention record fields must have equal length")


def _split(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("both classes must be present")
    return scores, labels


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC, ties counted one half."""
    scores, labels = _split(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold: float) -> Tuple[int, int, int, int]:
    """``(tp, fn, tn, fp)`` predicting malignant when ``score >= threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pred = scores >= threshold
    pos = labels == 1
    tp = int((pred & pos).sum())
    fp = int((pred & ~pos).sum())
    return tp, int(pos.sum()) - tp, int((~pos).sum()) - fp, fp


def youden_threshold(scores: Sequence[float], labels: Sequence[int]) -> Tuple[float, float, float]:
    """Threshold maximizing sensitivity + specificity - 1.

    Candidates are -inf, +inf and midpoints between adjacent distinct scores.
    Ties go to higher sensitivity, then to the lower threshold.
    """
    scores, labels = _split(scores, labels)
    distinct = np.unique(scores)
    candidates = [-math.inf, *((distinct[:-1] + distinct[1:]) / 2.0), math.inf]
    n_pos = int((labels == 1).sum())
    n_neg = labels.size - n_pos
    best = None
    for thr in candidates:
        tp, _, tn, _ = confusion(scores, labels, thr)
        # J * n_pos * n_neg, exact in integers
        key = (tp * n_neg + tn * n_pos, tp, -thr)
        if best is None or key > best[0]:
            best = (key, thr, tp, tn)
    _, thr, tp, tn = best
    return float(thr), tp / n_pos, tn / n_neg


def metrics_report(scores, labels) -> MetricsReport:
    scores, labels = _split(scores, labels)
    thr, sens, spec = youden_threshold(scores, labels)
    tp, fn, tn, fp = confusion(scores, labels, thr)
    return MetricsReport(
        auc=auc(scores, labels),
        acc=(tp + tn) / labels.size,
        sensitivity=sens,
        specificity=spec,
        youden_threshold=thr,
        n_pos=tp + fn,
        n_neg=tn + fp,
    )


def malignancy_score(video_logits: np.ndarray) -> float:
    """Softmax probability of the malignant class."""
    z = float(video_logits[1] - video_logits[0])
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def evaluate(model: KGANet, test: Dataset, centers: ClassCenters) -> Tuple[MetricsReport, List[AttentionRecord]]:
    """Score every test video; attention records use distances to ``centers``."""
    if not test.videos:
        raise UndefinedMetricError("test split has no videos")
    scores, labels, records = [], [], []
    for video in test.videos:
        frames = video.frames
        mask = video.keyframe_mask
        if video.n_frames > model.config.max_frames:
            # deterministic evenly spaced subsample for evaluation
            keep = np.linspace(0, video.n_frames - 1, model.config.max_frames).round().astype(int)
            frames, mask = frames[keep], mask[keep]
        out = model.video_forward(frames)
        scores.append(malignancy_score(out.video_logits.data))
        labels.append(video.label)
        records.append(
            AttentionRecord(
                video.id,
                out.attention_weights.data.copy(),
                distances_to_center(out.frame_features, video.label, centers),
                mask.copy(),
            )
        )
    return metrics_report(scores, labels), records


def _pooled(records: Sequence[AttentionRecord]) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        return np.zeros(0), np.zeros(0)
    w = np.concatenate([np.asarray(r.weights, dtype=np.float64) for r in records])
    d = np.concatenate([np.asarray(r.distances, dtype=np.float64) for r in records])
    return w, d


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise UndefinedMetricError("correlation needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation undefined for zero variance")
    return float((xc @ yc) / math.sqrt(sxx * syy))


def attention_distance_correlation(records: Sequence[AttentionRecord]) -> float:
    """Pearson r over all pooled (weight, distance) frame pairs."""
    return pearson(*_pooled(records))


def keyframe_attention_gap(records: Sequence[AttentionRecord]) -> float:
    """Mean attention on keyframe-mask frames minus mean on the others."""
    w = np.concatenate([np.asarray(r.weights, dtype=np.float64) for r in records])
    m = np.concatenate([np.asarray(r.keyframe_mask, dtype=bool) for r in records])
    if not m.any() or m.all():
        raise UndefinedMetricError("need both keyframe and non-keyframe frames")
    return float(w[m].mean() - w[~m].mean())


CSV_FIELDS = ("video_id", "frame_idx", "weight", "distance", "is_keyframe")


def write_attention_csv(path, records: Sequence[AttentionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            for i, (w, d, k) in enumerate(zip(r.weights, r.distances, r.keyframe_mask)):
                writer.writerow([r.video_id, i, repr(float(w)), repr(float(d)), int(bool(k))])


def read_attention_csv(path) -> List[AttentionRecord]:
    rows = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["video_id"]), []).append(
                (int(row["frame_idx"]), float(row["weight"]), float(row["distance"]), row["is_keyframe"] == "1")
            )
    records = []
    for vid, frames in rows.items():
        frames.sort()
        records.append(
            AttentionRecord(
                vid,
                np.array([f[1] for f in frames]),
                np.array([f[2] for f in frames]),
                np.array([f[3] for f in frames]),
            )
        )
    return records
