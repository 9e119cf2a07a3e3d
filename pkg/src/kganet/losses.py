"""Training losses: cross-entropy, center loss, Gram coherence loss, and their sum.

Labels are class ids: ``0`` benign, ``1`` malignant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DegenerateVectorError, DivergenceError

BENIGN = 0
MALIGNANT = 1
GRAM_EPS = 1e-8


@dataclass
class ClassCenters:
    c_mal: np.ndarray
    c_benign: np.ndarray
    alpha: float = 0.5

    @classmethod
    def zeros(cls, dim: int, alpha: float = 0.5) -> "ClassCenters":
        return cls(np.zeros(dim), np.zeros(dim), alpha)

    def __post_init__(self):
        self.c_mal = np.array(self.c_mal, dtype=np.float64)
        self.c_benign = np.array(self.c_benign, dtype=np.float64)
        if self.c_mal.shape != self.c_benign.shape or self.c_mal.ndim != 1:
            raise ContractError("class centers must be vectors of equal length")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError("center update rate must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.c_mal.shape[0]

    def for_label(self, label: int) -> np.ndarray:
        if label == MALIGNANT:
            return self.c_mal
        if label == BENIGN:
            return self.c_benign
        raise ContractError(f"invalid label {label!r}")

    def stacked(self) -> np.ndarray:
        """Centers as a 2×D array indexed by class id."""
        return np.stack([self.c_benign, self.c_mal])


@dataclass
class LossBreakdown:
    ce_video: float
    ce_image: float
    ce_frame: float
    center: float
    coherence: float
    total: float
    lam: float

    def identity_residual(self) -> float:
        expected = self.ce_video + (self.ce_image + self.ce_frame) + self.center + self.lam * self.coherence
        return abs(self.total - expected)

    def as_record(self, iteration: int) -> dict:
        return {
            "iter": iteration,
            "ce_video": self.ce_video,
            "ce_image": self.ce_image,
            "ce_frame": self.ce_frame,
            "center": self.center,
            "coherence": self.coherence,
            "total": self.total,
        }


def _labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != k:
        raise ContractError(f"{k} rows but {labels.shape[0]} labels")
    if np.any((labels != BENIGN) & (labels != MALIGNANT)):
        raise ContractError("labels must be 0 (benign) or 1 (malignant)")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the true class."""
    logits = ag.as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, logits.shape[0])
    k = logits.shape[0]
    if k == 0:
        raise ContractError("cross_entropy of an empty batch")
    labels = _labels(labels, k)
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    lse = ag.log(ag.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - lse
    onehot = np.zeros(logits.shape)
    onehot[np.arange(k), labels] = 1.0
    return ag.scale((log_probs * onehot).sum(), -1.0 / k)


def center_loss(features: Tensor, labels, centers: ClassCenters) -> Tensor:
    """``(1/2K) * sum_k ||f_k - c_{y_k}||^2``."""
    features = ag.as_tensor(features)
    if features.ndim == 1:
        features = features.reshape(1, features.shape[0])
    k = features.shape[0]
    if k < 1:
        raise ContractError("center_loss needs at least one feature")
    labels = _labels(labels, k)
    target = centers.stacked()[labels]
    return ag.scale(ag.square(features - target).sum(), 0.5 / k)


def update_centers(features, labels, centers: ClassCenters) -> ClassCenters:
    """Move each present class center toward that class's batch mean by ``alpha``."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats.reshape(1, -1)
    labels = _labels(labels, feats.shape[0])
    new = {BENIGN: centers.c_benign.copy(), MALIGNANT: centers.c_mal.copy()}
    for cls in (BENIGN, MALIGNANT):
        mask = labels == cls
        if mask.any():
            c = new[cls]
            new[cls] = c - centers.alpha * (c - feats[mask].mean(axis=0))
    return ClassCenters(new[MALIGNANT], new[BENIGN], centers.alpha)


def gram(x: Tensor, eps: float = GRAM_EPS) -> Tensor:
    """Normalized outer product ``x x^T / ||x||^2``.

    Raises :class:`DegenerateVectorError` when ``||x|| <= eps``.
    """
    x = ag.as_tensor(x)
    if x.ndim != 1:
        raise ContractError(f"gram expects a vector, got shape {x.shape}")
    sq = ag.square(x).sum()
    if math.sqrt(sq.item()) <= eps:
        raise DegenerateVectorError(f"vector norm below {eps}")
    return ag.outer(x, x) / sq


def _gram_or_uniform(x: Tensor) -> Tensor:
    try:
        return gram(x)
    except DegenerateVectorError:
        n = x.shape[0]
        return Tensor(np.full((n, n), 1.0 / n))


def coherence_loss(weights: Tensor, distances) -> Tensor:
    """Frobenius distance between the Gram matrices of ``1 - w`` and ``d``.

    ``distances`` is treated as a constant target.
    """
    weights = ag.as_tensor(weights)
    d = Tensor(np.asarray(distances.data if isinstance(distances, Tensor) else distances, dtype=np.float64))
    n = weights.shape[0] if weights.ndim == 1 else 0
    if n < 1 or d.shape != (n,):
        raise ContractError(f"coherence_loss needs matching vectors, got {weights.shape} and {d.shape}")
    diff = _gram_or_uniform(1.0 - weights) - _gram_or_uniform(d)
    return ag.l2_norm(diff.reshape(n * n))


def distances_to_center(features, label: int, centers: ClassCenters) -> np.ndarray:
    """Per-frame Euclidean distance to the center of ``label`` (detached)."""
    feats = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    return np.sqrt(((feats - centers.for_label(label)) ** 2).sum(axis=1))


LOSS_TERMS = ("ce_video", "ce_image", "ce_frame", "center", "coherence")


def total_loss(ce_video, ce_image, ce_frame, center, coherence, lam: float = 1.0) -> Tensor:
    """``ce_video + (ce_image + ce_frame) + center + lam * coherence``."""
    parts = [ag.as_tensor(p) for p in (ce_video, ce_image, ce_frame, center, coherence)]
    for name, part in zip(LOSS_TERMS, parts):
        if not np.all(np.isfinite(part.data)):
            raise DivergenceError(name, {n: float(p.data) for n, p in zip(LOSS_TERMS, parts)})
    v, i, f, c, h = parts
    return v + (i + f) + c + ag.scale(h, lam)

