"""Concept distributions, class centroids, Jensen-Shannon divergence, the
class-aware concept-distribution (CCD) loss, and the FC-free classifier.

A sample's concept distribution is its prototype responses concatenated in
slot order (layers ascending, segments ascending) and L1-normalized into a
single probability vector spanning every layer.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    ConfigurationError,
    DegenerateSampleError,
    MissingClassError,
    ShapeMismatchError,
    SlotMismatchError,
)
from .segmentation import SlotKey

LOG_FLOOR = 1e-12  # clamp applied inside logarithms only, never to stored values
JS_UPPER_BOUND = math.log(2.0)


@dataclass(frozen=True)
class ConceptDistribution:
    """Probability vector over all prototype slots across all layers."""

    probabilities: np.ndarray
    slots: tuple[SlotKey, ...]

    def __post_init__(self):
        probs = np.asarray(self.probabilities, dtype=np.float64)
        object.__setattr__(self, "probabilities", probs)
        if probs.ndim != 1 or probs.shape[0] != len(self.slots):
            raise ShapeMismatchError(
                f"{probs.shape} probabilities for {len(self.slots)} slots"
            )
        if (probs < 0).any():
            raise ShapeMismatchError("probabilities must be nonnegative")
        if abs(float(probs.sum()) - 1.0) > 1e-9:
            raise ShapeMismatchError(f"probabilities sum to {float(probs.sum())!r}, not 1")
        if list(self.slots) != sorted(self.slots):
            raise SlotMismatchError("slots must be ordered by layer then segment")


def build_distribution(responses, slots: Sequence[SlotKey]) -> ConceptDistribution:
    """Normalize per-slot responses (each in [0, 1]) into a distribution.

    `responses` is either a mapping slot -> response or an array already in
    slot order. All-zero responses cannot be normalized and signal a
    pathological sample.
    """
    slots = tuple(slots)
    if isinstance(responses, Mapping):
        missing = [s for s in slots if s not in responses]
        if missing:
            raise SlotMismatchError(f"missing responses for slots {missing}")
        if len(responses) != len(slots):
            extra = set(responses) - set(slots)
            raise SlotMismatchError(f"unexpected response slots {sorted(extra)}")
        vec = np.array([float(responses[s]) for s in slots], dtype=np.float64)
    else:
        vec = np.asarray(responses, dtype=np.float64)
        if vec.shape != (len(slots),):
            raise ShapeMismatchError(f"expected {len(slots)} responses, got shape {vec.shape}")
    if (vec < 0).any() or (vec > 1).any():
        raise ShapeMismatchError("responses must lie in [0, 1]")
    total = float(vec.sum())
    if total <= 0.0:
        raise DegenerateSampleError("all prototype responses are zero; cannot normalize")
    return ConceptDistribution(vec / total, slots)


@dataclass
class ClassCentroidSet:
    """Per-class mean concept distributions; doubles as the classifier and
    as the class-level explanation."""

    centroids: dict[str, np.ndarray]
    sample_counts: dict[str, int]
    slots: tuple[SlotKey, ...]
    epoch_version: int = 0

    def __post_init__(self):
        for label, vec in self.centroids.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (len(self.slots),):
                raise ShapeMismatchError(f"centroid for {label!r} has shape {vec.shape}")
            self.centroids[label] = vec

    @property
    def labels(self) -> tuple[str, ...]:
        """Canonical label order used for tie-breaking and report columns."""
        return tuple(sorted(self.centroids))

    def centroid(self, label: str) -> np.ndarray:
        if label not in self.centroids:
            raise MissingClassError(f"no centroid for class {label!r}")
        return self.centroids[label]

    def matrix(self) -> np.ndarray:
        """num_classes x num_slots matrix in canonical label order."""
        return np.stack([self.centroids[c] for c in self.labels])

    def __len__(self) -> int:
        return len(self.centroids)


def class_centroids(
    distributions: Sequence[ConceptDistribution],
    labels: Sequence[str],
    epoch_version: int = 0,
) -> ClassCentroidSet:
    """Arithmetic mean of member distributions per class.

    A mean of probability vectors is itself a probability vector, so no
    renormalization is applied.
    """
    if not distributions:
        raise ShapeMismatchError("need at least one distribution")
    if len(distributions) != len(labels):
        raise ShapeMismatchError(f"{len(distributions)} distributions but {len(labels)} labels")
    slots = distributions[0].slots
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for dist, label in zip(distributions, labels):
        if dist.slots != slots:
            raise SlotMismatchError("all distributions must share one slot index")
        if label not in sums:
            sums[label] = np.zeros(len(slots), dtype=np.float64)
            counts[label] = 0
        sums[label] += dist.probabilities
        counts[label] += 1
    centroids = {label: sums[label] / counts[label] for label in sums}
    return ClassCentroidSet(centroids, counts, slots, epoch_version=epoch_version)


def _kl(p: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    # p * (log p - log m) with the 0 log 0 = 0 convention; the floor keeps
    # gradients finite without altering any stored probability.
    logs = torch.log(torch.clamp(p, min=LOG_FLOOR)) - torch.log(torch.clamp(m, min=LOG_FLOOR))
    return (p * logs).sum(dim=-1)


def _unwrap(value, other=None) -> torch.Tensor:
    if isinstance(value, ConceptDistribution):
        if isinstance(other, ConceptDistribution) and value.slots != other.slots:
            raise SlotMismatchError("distributions use different slot orderings")
        value = value.probabilities
    return torch.as_tensor(value, dtype=None if torch.is_tensor(value) else torch.float64)


def js_divergence(p, q):
    """Jensen-Shannon divergence, natural log, bounded by ln 2.

    Accepts ConceptDistribution, numpy arrays, or torch tensors; returns a
    torch scalar when given tensors (gradients flow), a float otherwise.
    """
    tensor_in = torch.is_tensor(p) or torch.is_tensor(q)
    pt = _unwrap(p, q)
    qt = _unwrap(q, p)
    if pt.shape != qt.shape:
        raise ShapeMismatchError(f"length mismatch: {tuple(pt.shape)} vs {tuple(qt.shape)}")
    m = 0.5 * (pt + qt)
    out = 0.5 * _kl(pt, m) + 0.5 * _kl(qt, m)
    return out if tensor_in else float(out)


def js_divergence_matrix(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Row-wise JS divergences: p is B x S, q is C x S, result is B x C."""
    pm = p[:, None, :]
    qm = q[None, :, :]
    m = 0.5 * (pm + qm)
    return 0.5 * _kl(pm.expand_as(m), m) + 0.5 * _kl(qm.expand_as(m), m)


@dataclass(frozen=True)
class CCDParams:
    """Margin and weight of the class-aware concept-distribution loss."""

    margin: float = 0.01
    loss_weight: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.margin <= JS_UPPER_BOUND):
            raise ConfigurationError(f"margin must lie in (0, ln 2], got {self.margin}")
        if self.loss_weight <= 0.0:
            raise ConfigurationError(f"loss weight must be positive, got {self.loss_weight}")


def ccd_from_divergences(j_own: float, j_others: Sequence[float], margin: float) -> float:
    """Pull term plus hinge push terms, given precomputed divergences."""
    return float(j_own) + sum(max(margin - float(j), 0.0) for j in j_others)


def ccd_loss(
    sample: ConceptDistribution,
    label: str,
    centroids: ClassCentroidSet,
    params: CCDParams,
) -> float:
    """J(sample, own centroid) + sum over other classes of max(m - J, 0).

    Centroids are constants: this is the evaluation-side form; the
    differentiable batched form is `ccd_loss_responses`.
    """
    if sample.slots != centroids.slots:
        raise SlotMismatchError("sample and centroids use different slot orderings")
    own = centroids.centroid(label)
    j_own = js_divergence(sample.probabilities, own)
    j_others = [
        js_divergence(sample.probabilities, centroids.centroids[c])
        for c in centroids.labels
        if c != label
    ]
    return ccd_from_divergences(j_own, j_others, params.margin)


def ccd_loss_responses(
    responses: torch.Tensor,
    label_indices: torch.Tensor,
    centroid_matrix: torch.Tensor,
    params: CCDParams,
) -> torch.Tensor:
    """Differentiable CCD loss from raw (pre-normalization) responses.

    `responses` is B x S in [0, 1]; `label_indices` indexes rows of the
    constant `centroid_matrix` (C x S, canonical label order). Returns the
    per-sample loss vector of length B.
    """
    if responses.ndim == 1:
        responses = responses[None, :]
        label_indices = torch.as_tensor(label_indices).reshape(1)
    totals = responses.sum(dim=1, keepdim=True)
    if (totals <= 0).any():
        raise DegenerateSampleError("a sample has all-zero responses; cannot normalize")
    dists = responses / totals
    j = js_divergence_matrix(dists, centroid_matrix.detach())
    b, c = j.shape
    own = j[torch.arange(b), label_indices]
    hinge = torch.clamp(params.margin - j, min=0.0)
    hinge = hinge.scatter(1, label_indices[:, None], 0.0)
    return own + hinge.sum(dim=1)


def classify(
    sample: ConceptDistribution,
    centroids: ClassCentroidSet,
) -> tuple[str, list[float]]:
    """Nearest-centroid decision under JS divergence.

    Returns the winning label plus the per-class divergence list in
    canonical label order; ties go to the smallest label.
    """
    if len(centroids) == 0:
        raise MissingClassError("centroid set is empty")
    if sample.slots != centroids.slots:
        raise SlotMismatchError("sample and centroids use different slot orderings")
    labels = centroids.labels
    divergences = [js_divergence(sample.probabilities, centroids.centroids[c]) for c in labels]
    best = min(range(len(labels)), key=lambda i: (divergences[i], labels[i]))
    return labels[best], divergences


def concept_discriminativeness(centroids: ClassCentroidSet) -> np.ndarray:
    """Per-slot population standard deviation of centroid probabilities
    across classes; high values mark concepts that separate classes."""
    if len(centroids) < 2:
        raise MissingClassError("need at least 2 classes to measure spread")
    return centroids.matrix().std(axis=0, ddof=0)
