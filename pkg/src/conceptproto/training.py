"""Training loop: combined segment-diversity + class-distribution objective,
per-epoch refresh of prototypes and class centroids, and a finite-difference
gradient verification harness.

The cycle is: extract prototypes and centroids from the initial features,
then repeat (train one epoch against those constants, re-extract both).
Prototypes and centroids never receive gradients; only backbone weights do.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import BackboneSpec, MultiStageBackbone, build_backbone
from .distribution import CCDParams, ClassCentroidSet, ccd_loss_responses, class_centroids
from .errors import (
    ConfigurationError,
    MissingClassError,
    NonFiniteInputError,
    StaleStateError,
    ToolkitError,
    TrainingDivergedError,
)
from .kernel_alignment import cka_loss_layer, cka_similarity_matrix
from .pipeline import (
    batch_responses,
    centroid_tensor,
    dataset_distributions,
    distribution_objects,
    layer_features,
    layer_segment_view,
)
from .prototypes import (
    PrototypeBank,
    WeightedMoments,
    degenerate_prototype,
    extract_prototype,
)
from .segmentation import SegmentationConfig, flatten_for_cka, split_segments

logger = logging.getLogger(__name__)

LOSS_MODES = ("both", "cka-only", "ccd-only")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 40
    segment_channels: int | tuple[int, ...] = 8
    ccd: CCDParams = field(default_factory=CCDParams)
    loss_mode: str = "both"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4:
            raise ConfigurationError(
                f"batch_size must be >= 4 (unbiased HSIC precondition), got {self.batch_size}"
            )
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")


@dataclass
class EpochLosses:
    epoch: int
    cka: float
    ccd: float
    total: float


@dataclass
class TrainState:
    backbone: MultiStageBackbone
    seg_config: SegmentationConfig
    bank: PrototypeBank | None
    centroids: ClassCentroidSet | None
    epoch: int = 0
    loss_history: list[EpochLosses] = field(default_factory=list)
    classes: tuple[str, ...] = ()


def total_loss(
    features: list[torch.Tensor],
    labels: list[str],
    bank: PrototypeBank,
    centroids: ClassCentroidSet,
    seg_config: SegmentationConfig,
    params: CCDParams,
    mode: str = "both",
) -> tuple[torch.Tensor, dict]:
    """Combined objective on one batch.

    CKA term: sum over layers of the mean pairwise segment CKA (layers with
    a single segment have no pairs and contribute nothing). CCD term: sum
    over batch samples, weighted by `params.loss_weight`. Prototypes and
    centroids are constants here.
    """
    if bank.epoch_version != centroids.epoch_version:
        raise StaleStateError(
            f"prototype bank is at refresh {bank.epoch_version} but centroids at {centroids.epoch_version}"
        )
    if mode not in LOSS_MODES:
        raise ConfigurationError(f"unknown loss mode {mode!r}")

    dtype = features[0].dtype
    zero = torch.zeros((), dtype=dtype)
    cka_terms: list[torch.Tensor] = []
    if mode in ("both", "cka-only"):
        for layer in range(1, seg_config.num_layers + 1):
            if seg_config.segments_in_layer(layer) < 2:
                continue  # no pairs to compare
            segs = split_segments(features[layer - 1], seg_config, layer)
            # float64: the unbiased self-HSIC of a low-variance segment
            # cancels to exactly 0 in float32 and would falsely degenerate
            cka_terms.append(cka_loss_layer([flatten_for_cka(s).double() for s in segs]))
    cka_term = torch.stack(cka_terms).sum().to(dtype) if cka_terms else zero

    ccd_term = zero
    if mode in ("both", "ccd-only"):
        label_order = centroids.labels
        try:
            idx = torch.tensor([label_order.index(lab) for lab in labels], dtype=torch.long)
        except ValueError as e:
            raise MissingClassError(f"batch label missing from centroid set: {e}") from e
        responses = batch_responses(features, bank, seg_config)
        cmat = centroid_tensor(centroids, responses.dtype)
        ccd_term = ccd_loss_responses(responses, idx, cmat, params).sum()

    total = cka_term if mode == "cka-only" else (
        params.loss_weight * ccd_term if mode == "ccd-only" else cka_term + params.loss_weight * ccd_term
    )
    breakdown = {
        "cka": float(cka_term.detach()),
        "ccd": float(ccd_term.detach()),
        "total": float(total.detach()),
        "cka_per_layer": [float(t.detach()) for t in cka_terms],
    }
    return total, breakdown


def compute_bank(
    backbone: MultiStageBackbone | None,
    dataset,
    seg_config: SegmentationConfig,
    version: int,
    batch_size: int,
) -> PrototypeBank:
    """Full-dataset streaming moment pass, then one eigendecomposition per slot.

    Slots whose features were identically zero yield no direction; they are
    kept as degenerate placeholders that respond neutrally.
    """
    moments = {
        slot: WeightedMoments(dim=seg_config.segment_channels[slot[0] - 1])
        for slot in seg_config.slot_index()
    }
    if backbone is not None:
        backbone.eval()  # extraction must see the same features inference will
    with torch.no_grad():
        for batch, _, _ in dataset.iter_batches(batch_size):
            feats = layer_features(backbone, batch)
            for layer in range(1, seg_config.num_layers + 1):
                width = seg_config.segment_channels[layer - 1]
                v = layer_segment_view(feats[layer - 1], width).detach().double()
                vecs = v.permute(1, 0, 3, 4, 2).reshape(v.shape[1], -1, width).cpu().numpy()
                for seg in range(v.shape[1]):
                    moments[(layer, seg + 1)].update(vecs[seg])

    prototypes = {}
    for (layer, seg), acc in moments.items():
        try:
            prototypes[(layer, seg)] = extract_prototype(acc, layer, seg)
        except ToolkitError as e:
            logger.warning("slot (layer %d, segment %d) degenerate: %s", layer, seg, e)
            prototypes[(layer, seg)] = degenerate_prototype(acc.dim, layer, seg)
    return PrototypeBank(prototypes, epoch_version=version)


def compute_centroids(
    backbone: MultiStageBackbone | None,
    dataset,
    bank: PrototypeBank,
    seg_config: SegmentationConfig,
    version: int,
    batch_size: int,
) -> ClassCentroidSet:
    matrix, labels, _ = dataset_distributions(backbone, dataset, bank, seg_config, batch_size)
    dists = distribution_objects(matrix, seg_config.slot_index())
    return class_centroids(dists, labels, epoch_version=version)


def refresh_globals(state: TrainState, dataset, batch_size: int) -> TrainState:
    """Recompute the prototype bank, then the centroids against it, both
    stamped with the current epoch counter."""
    state.bank = compute_bank(state.backbone, dataset, state.seg_config, state.epoch, batch_size)
    state.centroids = compute_centroids(
        state.backbone, dataset, state.bank, state.seg_config, state.epoch, batch_size
    )
    return state


def make_optimizer(backbone: MultiStageBackbone, config: TrainConfig):
    optimizer = torch.optim.Adam(
        backbone.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.lr_decay_every, gamma=config.lr_decay_factor
    )
    return optimizer, scheduler


def train_epoch(state: TrainState, dataset, config: TrainConfig, optimizer) -> EpochLosses:
    """One shuffled pass; gradients reach backbone parameters only."""
    if state.bank is None or state.centroids is None:
        raise StaleStateError("refresh_globals must run before the first epoch")
    if not (state.bank.epoch_version == state.centroids.epoch_version == state.epoch):
        raise StaleStateError(
            f"state epoch {state.epoch} but bank/centroid versions "
            f"{state.bank.epoch_version}/{state.centroids.epoch_version}"
        )
    shuffle_seed = config.seed * 1_000_003 + state.epoch
    state.backbone.train()
    sums = {"cka": 0.0, "ccd": 0.0, "total": 0.0}
    batches = 0
    for batch_no, (x, labels, _) in enumerate(
        dataset.iter_batches(config.batch_size, shuffle_seed=shuffle_seed, min_batch=4)
    ):
        try:
            feats = layer_features(state.backbone, x)
            loss, parts = total_loss(
                feats, labels, state.bank, state.centroids, state.seg_config, config.ccd, config.loss_mode
            )
        except NonFiniteInputError as e:
            raise TrainingDivergedError(f"batch {batch_no}: non-finite features ({e})") from e
        if not math.isfinite(parts["total"]):
            raise TrainingDivergedError(
                f"batch {batch_no}: non-finite loss (cka={parts['cka']!r}, ccd={parts['ccd']!r})"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        for key in sums:
            sums[key] += parts[key]
        batches += 1
    if batches == 0:
        raise ConfigurationError("dataset produced no usable batches (all below the minimum size of 4)")
    losses = EpochLosses(
        epoch=state.epoch + 1,
        cka=sums["cka"] / batches,
        ccd=sums["ccd"] / batches,
        total=sums["total"] / batches,
    )
    state.loss_history.append(losses)
    return losses


def fit(
    backbone: MultiStageBackbone,
    dataset,
    config: TrainConfig,
    seg_config: SegmentationConfig,
) -> TrainState:
    """Full schedule: initial refresh, then (train, refresh) per epoch."""
    state = TrainState(
        backbone=backbone,
        seg_config=seg_config,
        bank=None,
        centroids=None,
        epoch=0,
        classes=tuple(dataset.classes),
    )
    refresh_globals(state, dataset, config.batch_size)
    optimizer, scheduler = make_optimizer(backbone, config)
    for _ in range(config.epochs):
        losses = train_epoch(state, dataset, config, optimizer)
        logger.info(
            "epoch %d: cka=%.5f ccd=%.5f total=%.5f", losses.epoch, losses.cka, losses.ccd, losses.total
        )
        state.epoch += 1
        refresh_globals(state, dataset, config.batch_size)
        scheduler.step()
    return state


def layer_similarity(
    backbone: MultiStageBackbone | None,
    dataset,
    seg_config: SegmentationConfig,
    batch_size: int,
    max_batches: int | None = None,
) -> list[tuple[np.ndarray, float]]:
    """Per-layer segment-similarity matrices averaged over deterministic
    batches, each with its strict-upper-triangle mean (NaN for layers with
    a single segment)."""
    mats = [None] * seg_config.num_layers
    count = 0
    if backbone is not None:
        backbone.eval()
    with torch.no_grad():
        for batch, _, _ in dataset.iter_batches(batch_size, min_batch=4):
            if max_batches is not None and count >= max_batches:
                break
            feats = layer_features(backbone, batch)
            for layer in range(1, seg_config.num_layers + 1):
                m = seg_config.segments_in_layer(layer)
                if m < 2:
                    mats[layer - 1] = np.ones((1, 1))
                    continue
                segs = split_segments(feats[layer - 1], seg_config, layer)
                mat, _ = cka_similarity_matrix([flatten_for_cka(s).double() for s in segs])
                mat = mat.cpu().numpy()
                mats[layer - 1] = mat if count == 0 else mats[layer - 1] + mat
            count += 1
    if count == 0:
        raise ConfigurationError("no batches available for similarity evaluation")
    out = []
    for layer in range(1, seg_config.num_layers + 1):
        m = seg_config.segments_in_layer(layer)
        if m < 2:
            out.append((np.ones((1, 1)), float("nan")))
            continue
        mat = mats[layer - 1] / count
        mean = float(mat[np.triu_indices(m, k=1)].mean())
        out.append((mat, mean))
    return out


class _ArrayBatches:
    """Minimal in-memory dataset for the gradient-check harness."""

    def __init__(self, x: torch.Tensor, labels: list[str]):
        self.x = x
        self._labels = labels
        self.classes = tuple(sorted(set(labels)))

    def iter_batches(self, batch_size: int, shuffle_seed=None, min_batch: int = 1):
        yield self.x, list(self._labels), [f"s{i}" for i in range(len(self._labels))]


@dataclass
class GradientCheckReport:
    modes: dict[str, dict]

    def to_dict(self) -> dict:
        return {"modes": self.modes}

    @property
    def max_relative_error(self) -> float:
        return max(m["max_rel_error"] for m in self.modes.values())


def gradient_check(
    seed: int = 0,
    batch_size: int = 6,
    image_size: int = 16,
    channels: tuple[int, ...] = (8, 16),
    segment_channels: int = 4,
    n_params: int = 60,
    step: float = 1e-4,
    modes: tuple[str, ...] = LOSS_MODES,
) -> GradientCheckReport:
    """Compare autograd parameter gradients of the objective against central
    finite differences on a tiny double-precision backbone."""
    if not (4 <= batch_size <= 8):
        raise ConfigurationError("gradient check expects batch_size in [4, 8]")
    spec = BackboneSpec(channels=channels, strides=(2,) * len(channels), seed=seed)
    backbone = build_backbone(spec, dtype=torch.float64)
    # eval mode: the checked function must be pure in the parameters
    # (train-mode batch norm would mutate running statistics per call)
    backbone.eval()
    if backbone.parameter_count() > 10_000:
        raise ConfigurationError(f"gradient-check backbone too large: {backbone.parameter_count()} parameters")
    seg_config = SegmentationConfig.uniform(channels, segment_channels)

    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch_size, 3, image_size, image_size, generator=gen, dtype=torch.float64)
    class_names = ["a", "b", "c"]
    labels = [class_names[i % 3] for i in range(batch_size)]

    data = _ArrayBatches(x, labels)
    bank = compute_bank(backbone, data, seg_config, version=0, batch_size=batch_size)
    centroids = compute_centroids(backbone, data, bank, seg_config, version=0, batch_size=batch_size)
    params = CCDParams()

    def loss_value(mode: str) -> torch.Tensor:
        feats = backbone(x)
        value, _ = total_loss(feats, labels, bank, centroids, seg_config, params, mode)
        return value

    flat_params = [p for p in backbone.parameters() if p.requires_grad]
    coords = []
    rng = np.random.default_rng(seed)
    for pi, p in enumerate(flat_params):
        for offset in range(p.numel()):
            coords.append((pi, offset))
    picked = [coords[i] for i in rng.choice(len(coords), size=min(n_params, len(coords)), replace=False)]

    results = {}
    for mode in modes:
        loss = loss_value(mode)
        grads = torch.autograd.grad(loss, flat_params, allow_unused=True)
        rel_errors = []
        for pi, offset in picked:
            with torch.no_grad():
                flat = flat_params[pi].view(-1)
                original = flat[offset].item()
                flat[offset] = original + step
                up = float(loss_value(mode))
                flat[offset] = original - step
                down = float(loss_value(mode))
                flat[offset] = original
            numeric = (up - down) / (2.0 * step)
            analytic = 0.0 if grads[pi] is None else float(grads[pi].view(-1)[offset])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            rel_errors.append(abs(analytic - numeric) / denom)
        results[mode] = {
            "max_rel_error": float(np.max(rel_errors)),
            "median_rel_error": float(np.median(rel_errors)),
            "n_params": len(picked),
        }
    return GradientCheckReport(modes=results)
