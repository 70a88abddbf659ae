"""Few-shot generalization protocol: hold out unseen classes, build their
centroids from k support images using prototypes learned on seen classes
only, then classify the remaining unseen-class queries."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .distribution import ClassCentroidSet, class_centroids, classify
from .errors import ConfigurationError
from .pipeline import dataset_distributions, distribution_objects
from .training import TrainState

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FewShotSplit:
    seen_classes: tuple[str, ...]
    unseen_classes: tuple[str, ...]
    support: dict[str, tuple[str, ...]]
    query: dict[str, tuple[str, ...]]
    k: int
    seed: int

    def __post_init__(self):
        overlap = set(self.seen_classes) & set(self.unseen_classes)
        if overlap:
            raise ConfigurationError(f"classes in both seen and unseen sets: {sorted(overlap)}")
        for cls in self.unseen_classes:
            sup = self.support.get(cls, ())
            if len(sup) != self.k:
                raise ConfigurationError(f"class {cls!r} has {len(sup)} support samples, expected k={self.k}")
            if set(sup) & set(self.query.get(cls, ())):
                raise ConfigurationError(f"class {cls!r}: support and query sets overlap")

    def to_dict(self) -> dict:
        return {
            "seen_classes": list(self.seen_classes),
            "unseen_classes": list(self.unseen_classes),
            "support": {c: list(v) for c, v in self.support.items()},
            "query": {c: list(v) for c, v in self.query.items()},
            "k": self.k,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FewShotSplit":
        return cls(
            seen_classes=tuple(d["seen_classes"]),
            unseen_classes=tuple(d["unseen_classes"]),
            support={c: tuple(v) for c, v in d["support"].items()},
            query={c: tuple(v) for c, v in d["query"].items()},
            k=int(d["k"]),
            seed=int(d["seed"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "FewShotSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def make_split(dataset, unseen_fraction: float = 1 / 3, k: int = 5, seed: int = 0) -> FewShotSplit:
    """Deterministic class partition plus per-class support draw.

    `dataset` needs `.classes` and `.samples` (id/label records). Support
    samples are drawn uniformly without replacement; everything else in an
    unseen class becomes query."""
    classes = sorted(dataset.classes)
    if not 0.0 < unseen_fraction < 1.0:
        raise ConfigurationError(f"unseen_fraction must be in (0, 1), got {unseen_fraction}")
    n_unseen = max(1, round(len(classes) * unseen_fraction))
    if n_unseen >= len(classes):
        raise ConfigurationError(f"unseen fraction {unseen_fraction} leaves no seen classes")

    rng = np.random.default_rng(seed)
    unseen = tuple(sorted(rng.choice(classes, size=n_unseen, replace=False).tolist()))
    seen = tuple(c for c in classes if c not in unseen)

    by_class: dict[str, list[str]] = {c: [] for c in classes}
    for rec in dataset.samples:
        by_class[rec.label].append(rec.id)

    support, query = {}, {}
    for cls in unseen:
        ids = by_class[cls]
        if len(ids) <= k:
            raise ConfigurationError(
                f"unseen class {cls!r} has only {len(ids)} samples; needs more than k={k}"
            )
        chosen = rng.choice(len(ids), size=k, replace=False)
        chosen_set = {ids[i] for i in chosen}
        support[cls] = tuple(ids[i] for i in sorted(chosen))
        query[cls] = tuple(i for i in ids if i not in chosen_set)
    return FewShotSplit(seen, unseen, support, query, k=k, seed=seed)


def fewshot_centroids(state: TrainState, dataset, split: FewShotSplit, batch_size: int = 32) -> ClassCentroidSet:
    """Mean distribution of each unseen class's k support samples, scored
    against the seen-set-trained prototype bank (never refreshed here)."""
    support_ids = [sid for cls in split.unseen_classes for sid in split.support[cls]]
    if not support_ids:
        raise ConfigurationError("split has no support samples")
    subset = dataset.subset(support_ids)
    matrix, labels, _ = dataset_distributions(
        state.backbone if dataset.has_images else None,
        subset, state.bank, state.seg_config, batch_size,
    )
    dists = distribution_objects(matrix, state.seg_config.slot_index())
    return class_centroids(dists, labels, epoch_version=state.bank.epoch_version)


@dataclass
class FewShotResult:
    accuracy: float
    per_class: dict[str, float]
    n_query: int
    n_ties: int
    predictions: list[dict]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "n_query": self.n_query,
            "n_ties": self.n_ties,
            "predictions": self.predictions,
        }


def fewshot_evaluate(
    state: TrainState,
    dataset,
    split: FewShotSplit,
    batch_size: int = 32,
    centroids: ClassCentroidSet | None = None,
) -> FewShotResult:
    """Classify every query sample against the unseen-class centroid pool."""
    bank_version = state.bank.epoch_version
    if centroids is None:
        centroids = fewshot_centroids(state, dataset, split, batch_size)
    query_ids = [qid for cls in split.unseen_classes for qid in split.query[cls]]
    if not query_ids:
        raise ConfigurationError("split has no query samples")
    subset = dataset.subset(query_ids)
    matrix, labels, ids = dataset_distributions(
        state.backbone if dataset.has_images else None,
        subset, state.bank, state.seg_config, batch_size,
    )
    dists = distribution_objects(matrix, state.seg_config.slot_index())

    correct_total = 0
    ties = 0
    per_class_counts: dict[str, list[int]] = {c: [0, 0] for c in split.unseen_classes}
    predictions = []
    for dist, true_label, sid in zip(dists, labels, ids):
        predicted, divergences = classify(dist, centroids)
        smallest = min(divergences)
        if sum(1 for d in divergences if d == smallest) > 1:
            ties += 1
            logger.info("query %s: tied divergence %.3e, smallest label wins", sid, smallest)
        hit = predicted == true_label
        correct_total += hit
        per_class_counts[true_label][0] += hit
        per_class_counts[true_label][1] += 1
        predictions.append({"sample_id": sid, "true": true_label, "predicted": predicted})

    assert state.bank.epoch_version == bank_version, "few-shot evaluation must not touch the bank"
    per_class = {
        c: (hits / total if total else float("nan")) for c, (hits, total) in per_class_counts.items()
    }
    return FewShotResult(
        accuracy=correct_total / len(ids),
        per_class=per_class,
        n_query=len(ids),
        n_ties=ties,
        predictions=predictions,
    )
