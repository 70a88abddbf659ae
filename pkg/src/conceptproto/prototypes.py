"""Global concept prototypes: streaming energy-weighted moments, top
eigenvector extraction, and cosine response maps.

Each (layer, segment) slot gets one prototype: the leading eigenvector of
the covariance of all spatial feature vectors across the dataset, where
every vector is weighted by its L2 norm so that strong activations
dominate the direction estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NullPrototypeError, ShapeMismatchError
from .segmentation import SlotKey

logger = logging.getLogger(__name__)

# Eigenvalue gap below which the top eigenspace is treated as tied.
EIGENVALUE_TIE_TOL = 1e-9


@dataclass
class WeightedMoments:
    """Single-pass accumulator for norm-weighted first/second moments.

    Never stores raw vectors; `mean_acc` holds sum(w * v) and `scatter_acc`
    holds sum(w * v v^T) in float64.
    """

    dim: int
    weight_sum: float = 0.0
    mean_acc: np.ndarray = None
    scatter_acc: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.mean_acc is None:
            self.mean_acc = np.zeros(self.dim, dtype=np.float64)
        if self.scatter_acc is None:
            self.scatter_acc = np.zeros((self.dim, self.dim), dtype=np.float64)

    def update(self, vectors: np.ndarray) -> "WeightedMoments":
        """Accumulate an N x dim block of feature vectors, weighted by their norms."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ShapeMismatchError(
                f"expected N x {self.dim} vectors, got shape {vectors.shape}"
            )
        w = np.linalg.norm(vectors, axis=1)
        self.weight_sum += float(w.sum())
        self.mean_acc += w @ vectors
        wv = vectors * w[:, None]
        self.scatter_acc += wv.T @ vectors
        self.count += vectors.shape[0]
        return self


def accumulate_moments(moments: WeightedMoments, segment: torch.Tensor) -> WeightedMoments:
    """Fold a B x C' x H x W segment block into the accumulator.

    Every spatial position of every sample contributes one length-C'
    vector with weight equal to its L2 norm; zero vectors carry weight 0
    and leave the moments unchanged (they still count toward `count`).
    """
    segment = torch.as_tensor(segment)
    if segment.ndim != 4:
        raise ShapeMismatchError(f"expected B x C' x H x W segment, got {tuple(segment.shape)}")
    if segment.shape[1] != moments.dim:
        raise ShapeMismatchError(
            f"segment width {segment.shape[1]} does not match accumulator dim {moments.dim}"
        )
    vectors = segment.detach().permute(0, 2, 3, 1).reshape(-1, moments.dim).cpu().numpy()
    return moments.update(vectors)


@dataclass(frozen=True)
class ConceptPrototype:
    """Unit direction identifying one global concept for a (layer, segment) slot.

    `degenerate` marks slots where no direction could be extracted (all
    feature vectors were zero); such slots respond with a neutral constant.
    """

    direction: np.ndarray
    layer: int
    segment: int
    eigenvalue: float
    degenerate: bool = False

    @property
    def slot(self) -> SlotKey:
        return (self.layer, self.segment)


def _fix_sign(direction: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Orient toward the weighted mean; tie (exactly orthogonal) falls back
    to making the first nonzero coordinate positive."""
    dot = float(direction @ mean)
    if dot > 0.0:
        return direction
    if dot < 0.0:
        return -direction
    nz = np.nonzero(direction)[0]
    if nz.size and direction[nz[0]] < 0:
        return -direction
    return direction


def extract_prototype(moments: WeightedMoments, layer: int, segment: int) -> ConceptPrototype:
    """Top eigenvector of the weighted covariance, unit-normalized and sign-fixed.

    Cov = scatter/weight_sum - mu mu^T with mu = mean_acc/weight_sum. A zero
    covariance (all vectors share one direction) falls back to the mean
    direction; a tied top eigenvalue picks the lexicographically largest
    sign-fixed candidate and logs the degeneracy.
    """
    if moments.weight_sum <= 0.0:
        raise NullPrototypeError(
            f"slot (layer {layer}, segment {segment}): all feature vectors were zero, no prototype exists"
        )
    if moments.count < 2:
        raise NullPrototypeError(
            f"slot (layer {layer}, segment {segment}): need at least 2 vectors, saw {moments.count}"
        )
    mu = moments.mean_acc / moments.weight_sum
    cov = moments.scatter_acc / moments.weight_sum - np.outer(mu, mu)
    cov = 0.5 * (cov + cov.T)

    eigvals, eigvecs = np.linalg.eigh(cov)
    top = float(eigvals[-1])

    if top <= EIGENVALUE_TIE_TOL:
        # Zero covariance: a single direction is present; use the mean.
        norm = np.linalg.norm(mu)
        if norm == 0.0:
            raise NullPrototypeError(
                f"slot (layer {layer}, segment {segment}): zero covariance and zero mean"
            )
        logger.warning("slot (layer %d, segment %d): zero covariance, using mean direction", layer, segment)
        return ConceptPrototype(direction=mu / norm, layer=layer, segment=segment, eigenvalue=max(top, 0.0))

    tied = [i for i in range(len(eigvals)) if eigvals[i] >= top - EIGENVALUE_TIE_TOL]
    candidates = [_fix_sign(np.ascontiguousarray(eigvecs[:, i]), mu) for i in tied]
    if len(candidates) > 1:
        logger.warning(
            "slot (layer %d, segment %d): top eigenvalue multiplicity %d, using lexicographic tie-break",
            layer, segment, len(candidates),
        )
    direction = max(candidates, key=tuple)
    direction = direction / np.linalg.norm(direction)
    return ConceptPrototype(direction=direction, layer=layer, segment=segment, eigenvalue=top)


@dataclass
class PrototypeBank:
    """All prototypes across layers, keyed by (layer, segment), plus the
    refresh epoch they were extracted at."""

    prototypes: dict[SlotKey, ConceptPrototype]
    epoch_version: int = 0

    def __post_init__(self):
        ordered = sorted(self.prototypes)
        if list(self.prototypes) != ordered:
            self.prototypes = {k: self.prototypes[k] for k in ordered}
        for slot, proto in self.prototypes.items():
            if proto.slot != slot:
                raise ShapeMismatchError(f"prototype for slot {slot} carries indices {proto.slot}")

    @property
    def slot_index(self) -> tuple[SlotKey, ...]:
        return tuple(self.prototypes)

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({layer for layer, _ in self.prototypes}))

    def __len__(self) -> int:
        return len(self.prototypes)

    def layer_slots(self, layer: int) -> list[ConceptPrototype]:
        return [p for (lay, _), p in self.prototypes.items() if lay == layer]

    def layer_directions(self, layer: int) -> np.ndarray:
        """M x C' matrix of directions; degenerate slots get zero rows."""
        protos = self.layer_slots(layer)
        return np.stack([p.direction for p in protos])

    def layer_degenerate_mask(self, layer: int) -> np.ndarray:
        return np.array([p.degenerate for p in self.layer_slots(layer)], dtype=bool)

    def with_version(self, version: int) -> "PrototypeBank":
        return PrototypeBank(dict(self.prototypes), epoch_version=version)


def degenerate_prototype(dim: int, layer: int, segment: int) -> ConceptPrototype:
    """Placeholder for a slot whose extraction failed; responds neutrally."""
    return ConceptPrototype(
        direction=np.zeros(dim, dtype=np.float64),
        layer=layer,
        segment=segment,
        eigenvalue=0.0,
        degenerate=True,
    )


def response_map(
    segment: torch.Tensor,
    prototype: ConceptPrototype,
    *,
    layer: int | None = None,
    segment_index: int | None = None,
) -> np.ndarray:
    """H x W map of cosine similarities between each position's feature
    vector and the prototype direction; zero vectors map to 0."""
    if layer is not None and layer != prototype.layer:
        raise ShapeMismatchError(f"layer mismatch: segment is from layer {layer}, prototype from {prototype.layer}")
    if segment_index is not None and segment_index != prototype.segment:
        raise ShapeMismatchError(
            f"segment mismatch: index {segment_index} vs prototype {prototype.segment}"
        )
    values = torch.as_tensor(segment).detach().cpu().numpy().astype(np.float64)
    if values.ndim == 4:
        if values.shape[0] != 1:
            raise ShapeMismatchError(f"response_map is per-sample; got batch of {values.shape[0]}")
        values = values[0]
    if values.ndim != 3 or values.shape[0] != prototype.direction.shape[0]:
        raise ShapeMismatchError(
            f"expected C' x H x W with C'={prototype.direction.shape[0]}, got {values.shape}"
        )
    if prototype.degenerate:
        return np.zeros(values.shape[1:], dtype=np.float64)
    dots = np.einsum("chw,c->hw", values, prototype.direction)
    norms = np.linalg.norm(values, axis=0) * np.linalg.norm(prototype.direction)
    out = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.clip(out, -1.0, 1.0)


def prototype_response(
    segment: torch.Tensor,
    prototype: ConceptPrototype,
    *,
    layer: int | None = None,
    segment_index: int | None = None,
) -> float:
    """Max-pooled cosine response, linearly mapped from [-1, 1] to [0, 1]."""
    if prototype.degenerate:
        return 0.5
    rmap = response_map(segment, prototype, layer=layer, segment_index=segment_index)
    return (float(rmap.max()) + 1.0) / 2.0
