"""Batched feature -> response -> distribution plumbing shared by the
training loop, the refresh passes, and every report/evaluation path."""

from __future__ import annotations

import numpy as np
import torch

from .backbone import MultiStageBackbone
from .distribution import ClassCentroidSet, ConceptDistribution
from .errors import DegenerateSampleError, ShapeMismatchError
from .prototypes import PrototypeBank
from .segmentation import SegmentationConfig

NEUTRAL_RESPONSE = 0.5  # degenerate slots contribute this constant, pre-normalization


def layer_features(backbone: MultiStageBackbone | None, batch) -> list[torch.Tensor]:
    """Run the backbone, or pass through an already-per-layer feature list
    (feature-archive sources skip the backbone entirely)."""
    if isinstance(batch, (list, tuple)):
        return [torch.as_tensor(f) for f in batch]
    if backbone is None:
        raise ShapeMismatchError("image batches need a backbone; only feature archives may omit one")
    return backbone(torch.as_tensor(batch))


def layer_segment_view(features: torch.Tensor, width: int) -> torch.Tensor:
    """Reshape B x C x H x W into B x M x C' x H x W; contiguous channel
    slices make this a pure view."""
    b, c, h, w = features.shape
    return features.reshape(b, c // width, width, h, w)


def layer_responses(
    features: torch.Tensor,
    directions: torch.Tensor,
    degenerate_mask: np.ndarray,
    width: int,
) -> torch.Tensor:
    """B x M matrix of max-pooled cosine responses mapped into [0, 1].

    `directions` (M x C') are treated as constants; gradients flow only
    through the features. Zero feature vectors score cosine 0.
    """
    v = layer_segment_view(features, width)
    directions = directions.to(dtype=v.dtype)
    dots = torch.einsum("bmchw,mc->bmhw", v, directions)
    norms = v.norm(dim=2) * directions.norm(dim=1)[None, :, None, None]
    cos = dots / torch.clamp(norms, min=1e-12)
    cos = torch.clamp(cos, -1.0, 1.0)
    resp = (cos.amax(dim=(2, 3)) + 1.0) / 2.0
    if degenerate_mask.any():
        mask = torch.as_tensor(degenerate_mask, device=resp.device)
        resp = torch.where(mask[None, :], torch.full_like(resp, NEUTRAL_RESPONSE), resp)
    return resp


def batch_responses(
    features: list[torch.Tensor],
    bank: PrototypeBank,
    config: SegmentationConfig,
) -> torch.Tensor:
    """Concatenate per-layer responses into a B x num_slots matrix in slot order."""
    if len(features) != config.num_layers:
        raise ShapeMismatchError(
            f"{len(features)} feature maps for {config.num_layers} configured layers"
        )
    pieces = []
    for layer in range(1, config.num_layers + 1):
        width = config.segment_channels[layer - 1]
        directions = torch.as_tensor(bank.layer_directions(layer))
        mask = bank.layer_degenerate_mask(layer)
        pieces.append(layer_responses(features[layer - 1], directions, mask, width))
    return torch.cat(pieces, dim=1)


def normalize_responses(responses: torch.Tensor) -> torch.Tensor:
    """L1-normalize response rows into distributions; all-zero rows are
    pathological and rejected."""
    totals = responses.sum(dim=1, keepdim=True)
    if (totals <= 0).any():
        bad = int((totals <= 0).sum())
        raise DegenerateSampleError(f"{bad} samples have all-zero responses; cannot normalize")
    return responses / totals


def dataset_responses(
    backbone: MultiStageBackbone | None,
    dataset,
    bank: PrototypeBank,
    config: SegmentationConfig,
    batch_size: int,
) -> tuple[np.ndarray, list[str], list[str]]:
    """One deterministic pass over a dataset: raw per-sample responses
    (N x num_slots float64, pre-normalization), labels, and sample ids.

    Runs the backbone in eval mode so per-sample results are independent of
    batch composition (batch-norm statistics stay frozen)."""
    rows, labels, ids = [], [], []
    if backbone is not None:
        backbone.eval()
    with torch.no_grad():
        for batch, batch_labels, batch_ids in dataset.iter_batches(batch_size):
            feats = layer_features(backbone, batch)
            rows.append(batch_responses(feats, bank, config).double().cpu().numpy())
            labels.extend(batch_labels)
            ids.extend(batch_ids)
    return np.concatenate(rows, axis=0), labels, ids


def dataset_distributions(
    backbone: MultiStageBackbone | None,
    dataset,
    bank: PrototypeBank,
    config: SegmentationConfig,
    batch_size: int,
) -> tuple[np.ndarray, list[str], list[str]]:
    """Like `dataset_responses`, but rows normalized into distributions."""
    responses, labels, ids = dataset_responses(backbone, dataset, bank, config, batch_size)
    resp = torch.from_numpy(responses)
    return normalize_responses(resp).numpy(), labels, ids


def distribution_objects(
    matrix: np.ndarray, slots
) -> list[ConceptDistribution]:
    return [ConceptDistribution(row, tuple(slots)) for row in matrix]


def centroid_tensor(centroids: ClassCentroidSet, dtype: torch.dtype) -> torch.Tensor:
    """Constant tensor of centroids in canonical label order."""
    return torch.as_tensor(centroids.matrix(), dtype=dtype)
