"""End-to-end experiment runners. Each function is the working core of one
service endpoint / CLI subcommand: it resolves datasets from config or
manifest paths, drives the training/evaluation machinery, writes artifacts,
and returns a JSON-serializable summary."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np
import torch

from .backbone import build_backbone
from .config import RunConfig, load_config
from .data.manifest import Dataset, Preprocessing, load_dataset
from .data.store import ArtifactStore, load_train_state, save_train_state
from .distribution import ConceptDistribution, classify
from .errors import ConfigurationError, IngestionError
from .fewshot import fewshot_centroids, fewshot_evaluate, make_split
from .pipeline import dataset_distributions, dataset_responses
from .training import (
    TrainState,
    compute_bank,
    compute_centroids,
    fit,
    gradient_check,
    layer_similarity,
)
from . import reports

logger = logging.getLogger(__name__)

SIMILARITY_EVAL_BATCHES = 4  # fixed deterministic sample for before/after comparisons


def _resolve_config(config) -> RunConfig:
    if isinstance(config, RunConfig):
        return config
    return load_config(config)


def _datasets(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    base = Path(cfg.base_dir) if cfg.base_dir else None
    manifest, pre = cfg.data.resolve("train", base)
    train = Dataset(manifest, pre)
    eval_ds = None
    if cfg.eval is not None:
        manifest, pre = cfg.eval.resolve("eval", base)
        eval_ds = Dataset(manifest, pre)
    return train, eval_ds


def _store_dataset(store_dir, data_manifest) -> tuple[TrainState, dict, Dataset]:
    state, snapshot = load_train_state(ArtifactStore(store_dir))
    cfg = RunConfig.from_dict(snapshot) if snapshot else RunConfig()
    pre = Preprocessing(
        image_size=cfg.data.image_size, mean=tuple(cfg.data.mean), std=tuple(cfg.data.std)
    )
    dataset = load_dataset(data_manifest, pre)
    return state, snapshot, dataset


def _mean_defined(values) -> float:
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("nan")


def run_train(config, out_store) -> dict:
    """Full training schedule plus similarity bookkeeping and persistence."""
    cfg = _resolve_config(config)
    train_ds, eval_ds = _datasets(cfg)
    if not train_ds.has_images:
        raise IngestionError(
            "training needs an image dataset: gradients flow through the backbone, "
            "which feature archives bypass"
        )
    torch.manual_seed(cfg.seed)
    backbone = build_backbone(cfg.backbone_spec())
    seg_config = cfg.segmentation()
    train_cfg = cfg.train_config()

    sim_initial = layer_similarity(
        backbone, train_ds, seg_config, train_cfg.batch_size, max_batches=SIMILARITY_EVAL_BATCHES
    )
    state = fit(backbone, train_ds, train_cfg, seg_config)
    sim_final = layer_similarity(
        backbone, train_ds, seg_config, train_cfg.batch_size, max_batches=SIMILARITY_EVAL_BATCHES
    )

    store = ArtifactStore(out_store)
    save_train_state(store, state, cfg.to_dict())
    loss_csv = Path(out_store) / "losses.csv"
    reports.write_loss_csv(state.loss_history, loss_csv)

    result = {
        "store": str(out_store),
        "epochs": state.epoch,
        "classes": list(state.classes),
        "loss_csv": str(loss_csv),
        "final_losses": dataclasses.asdict(state.loss_history[-1]) if state.loss_history else None,
        "cka_upper_tri_initial": [m for _, m in sim_initial],
        "cka_upper_tri_final": [m for _, m in sim_final],
        "mean_cka_initial": _mean_defined([m for _, m in sim_initial]),
        "mean_cka_final": _mean_defined([m for _, m in sim_final]),
    }
    if eval_ds is not None:
        evaluation = _evaluate(state, eval_ds)
        result["test_accuracy"] = evaluation["accuracy"]
    (Path(out_store) / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def run_extract(store_dir, data_manifest) -> dict:
    """Refresh-only pass: rebuild prototypes and centroids from a dataset
    without touching backbone weights."""
    state, snapshot, dataset = _store_dataset(store_dir, data_manifest)
    cfg = RunConfig.from_dict(snapshot) if snapshot else RunConfig()
    batch = cfg.batch_size
    state.bank = compute_bank(state.backbone, dataset, state.seg_config, state.epoch, batch)
    state.centroids = compute_centroids(
        state.backbone, dataset, state.bank, state.seg_config, state.epoch, batch
    )
    state.classes = tuple(sorted(dataset.classes))
    save_train_state(ArtifactStore(store_dir), state, snapshot)
    return {
        "store": str(store_dir),
        "bank_version": state.bank.epoch_version,
        "centroid_version": state.centroids.epoch_version,
        "num_prototypes": len(state.bank),
        "classes": list(state.centroids.labels),
    }


def _evaluate(state: TrainState, dataset: Dataset, batch_size: int = 32) -> dict:
    backbone = state.backbone if dataset.has_images else None
    matrix, labels, ids = dataset_distributions(
        backbone, dataset, state.bank, state.seg_config, batch_size
    )
    slots = state.seg_config.slot_index()
    records = []
    correct = 0
    for row, true_label, sid in zip(matrix, labels, ids):
        dist = ConceptDistribution(row, slots)
        predicted, divergences = classify(dist, state.centroids)
        correct += predicted == true_label
        records.append(
            {
                "sample_id": sid,
                "predicted": predicted,
                "true": true_label,
                "divergences": [float(d) for d in divergences],
            }
        )
    return {"accuracy": correct / len(records), "records": records}


def run_classify(store_dir, data_manifest, report_path) -> dict:
    state, _, dataset = _store_dataset(store_dir, data_manifest)
    evaluation = _evaluate(state, dataset)
    report = reports.write_classification_report(
        evaluation["records"], state.centroids.labels, evaluation["accuracy"], report_path
    )
    return {
        "report": str(report_path),
        "accuracy": report["accuracy"],
        "n_samples": report["n_samples"],
        "classes": report["classes"],
    }


def run_explain(store_dir, data_manifest, top_k, out_dir) -> dict:
    """Per-prototype top-k response grids, per-sample distribution table,
    per-slot discriminativeness, and the null-prototype report."""
    state, snapshot, dataset = _store_dataset(store_dir, data_manifest)
    if not dataset.has_images:
        raise IngestionError("explanation grids need an image dataset; feature archives carry no images")
    cfg = RunConfig.from_dict(snapshot) if snapshot else RunConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    responses, labels, ids = dataset_responses(
        state.backbone, dataset, state.bank, state.seg_config, cfg.batch_size
    )
    slots = state.seg_config.slot_index()
    totals = responses.sum(axis=1, keepdims=True)
    distributions = responses / totals

    grid_files = reports.write_topk_grids(
        dataset, state.backbone, state.bank, state.seg_config, responses, ids, top_k, out_dir / "prototypes"
    )
    reports.write_distribution_csv(distributions, ids, slots, out_dir / "distributions.csv")
    reports.write_discriminativeness_csv(state.centroids, out_dir / "discriminativeness.csv")
    nulls = reports.null_prototype_report(responses, slots, cfg.explain.null_threshold)
    (out_dir / "null_prototypes.json").write_text(json.dumps(nulls, indent=2))

    return {
        "out_dir": str(out_dir),
        "grids": grid_files,
        "distribution_csv": str(out_dir / "distributions.csv"),
        "discriminativeness_csv": str(out_dir / "discriminativeness.csv"),
        "null_prototypes": nulls["null_prototypes"],
    }


def run_heatmap(store_dir, data_manifest, out_dir) -> dict:
    state, snapshot, dataset = _store_dataset(store_dir, data_manifest)
    cfg = RunConfig.from_dict(snapshot) if snapshot else RunConfig()
    per_layer = layer_similarity(
        state.backbone if dataset.has_images else None,
        dataset,
        state.seg_config,
        cfg.batch_size,
    )
    written = reports.write_similarity_outputs(per_layer, state.seg_config, out_dir)
    return {
        "out_dir": str(out_dir),
        "files": written["files"],
        "upper_triangle_means": written["means"],
        "mean_over_layers": _mean_defined(written["means"]),
    }


def run_ablate(config, mode, out_store) -> dict:
    """Loss-ablation harness: same configuration, one loss mode."""
    cfg = _resolve_config(config)
    if cfg.eval is None:
        raise ConfigurationError("ablation needs an eval dataset in the config")
    cfg = dataclasses.replace(cfg, loss_mode=mode)
    result = run_train(cfg, out_store)
    return {
        "mode": mode,
        "store": str(out_store),
        "accuracy": result["test_accuracy"],
        "mean_cka_final": result["mean_cka_final"],
        "mean_cka_initial": result["mean_cka_initial"],
    }


def run_sweep(config, values, out_root) -> dict:
    """Segment-width sweep harness: one training run per width."""
    cfg = _resolve_config(config)
    if cfg.eval is None:
        raise ConfigurationError("sweep needs an eval dataset in the config")
    out_root = Path(out_root)
    runs = []
    for width in values:
        sub = dataclasses.replace(cfg, segment_channels=int(width))
        store = out_root / f"segment_width_{width}"
        result = run_train(sub, store)
        runs.append(
            {
                "segment_channels": int(width),
                "accuracy": result["test_accuracy"],
                "store": str(store),
                "num_slots": sub.segmentation().num_slots,
            }
        )
    return {"runs": runs}


def run_fewshot(store_dir, data_manifest, k: int = 5, seed: int = 0, unseen_fraction: float = 1 / 3) -> dict:
    """Few-shot protocol against a store trained on the seen classes."""
    state, _, dataset = _store_dataset(store_dir, data_manifest)
    split = make_split(dataset, unseen_fraction=unseen_fraction, k=k, seed=seed)
    trained_on = set(state.classes)
    leaked = trained_on & set(split.unseen_classes)
    if leaked:
        logger.warning("store was trained on classes now marked unseen: %s", sorted(leaked))

    centroids = fewshot_centroids(state, dataset, split)
    result = fewshot_evaluate(state, dataset, split, centroids=centroids)

    reports_dir = Path(store_dir) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    split_path = reports_dir / f"fewshot_split_k{k}_seed{seed}.json"
    split.save(split_path)
    report = {
        "k": k,
        "seed": seed,
        "unseen_classes": list(split.unseen_classes),
        "seen_classes": list(split.seen_classes),
        **result.to_dict(),
    }
    report_path = reports_dir / f"fewshot_k{k}_seed{seed}.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return {**report, "report": str(report_path), "split_file": str(split_path)}


def run_gradcheck(config=None, seed: int | None = None) -> dict:
    kwargs = {}
    if config is not None:
        cfg = _resolve_config(config)
        kwargs["seed"] = cfg.seed
    if seed is not None:
        kwargs["seed"] = seed
    report = gradient_check(**kwargs)
    return report.to_dict()
