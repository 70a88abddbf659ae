"""Report emitters: loss CSVs, similarity-matrix CSVs and heatmaps,
classification JSON records, explanation image grids, and per-slot
discriminativeness tables. All outputs are deterministic functions of
their inputs (no timestamps), so repeated runs produce identical bytes."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .distribution import ClassCentroidSet, concept_discriminativeness
from .prototypes import PrototypeBank, response_map
from .segmentation import SegmentationConfig, SlotKey, split_segments


def slot_name(slot: SlotKey) -> str:
    return f"layer{slot[0]}.segment{slot[1]}"


def write_loss_csv(history, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "cka_loss", "ccd_loss", "total"])
        for row in history:
            writer.writerow([row.epoch, repr(row.cka), repr(row.ccd), repr(row.total)])


def read_loss_csv(path) -> list[tuple[int, float, float, float]]:
    rows = []
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        next(reader)
        for epoch, cka, ccd, total in reader:
            rows.append((int(epoch), float(cka), float(ccd), float(total)))
    return rows


def write_similarity_outputs(per_layer, seg_config: SegmentationConfig, out_dir) -> dict:
    """One CSV (header row of segment ids) and one heatmap PNG per layer,
    plus a summary CSV of upper-triangle means."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    means = []
    for layer, (matrix, mean) in enumerate(per_layer, start=1):
        m = matrix.shape[0]
        ids = [f"segment{i}" for i in range(1, m + 1)]
        csv_path = out_dir / f"layer{layer}_similarity.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(ids)
            for row in matrix:
                writer.writerow([repr(float(v)) for v in row])
        png_path = out_dir / f"layer{layer}_similarity.png"
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
        title = f"layer {layer}"
        if np.isfinite(mean):
            title += f"  (upper-tri mean {mean:.3f})"
        ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        fig.savefig(png_path, dpi=110)
        plt.close(fig)
        files.extend([str(csv_path), str(png_path)])
        means.append(mean)
    means_path = out_dir / "upper_triangle_means.csv"
    with means_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "upper_triangle_mean"])
        for layer, mean in enumerate(means, start=1):
            writer.writerow([layer, repr(float(mean))])
    files.append(str(means_path))
    return {"files": files, "means": means}


def write_classification_report(records: list[dict], classes, accuracy: float, path) -> dict:
    report = {
        "accuracy": accuracy,
        "classes": list(classes),
        "n_samples": len(records),
        "records": records,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def write_distribution_csv(matrix: np.ndarray, ids, slots, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [slot_name(s) for s in slots])
        for sid, row in zip(ids, matrix):
            writer.writerow([sid] + [repr(float(v)) for v in row])


def write_discriminativeness_csv(centroids: ClassCentroidSet, path) -> np.ndarray:
    spread = concept_discriminativeness(centroids)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slot", "std_across_classes"])
        for slot, value in zip(centroids.slots, spread):
            writer.writerow([slot_name(slot), repr(float(value))])
    return spread


def _overlay(image: np.ndarray, rmap: np.ndarray) -> np.ndarray:
    """Blend a response map (upsampled by nearest neighbor) over an image;
    response 1 shows through strongly, response <= 0 leaves the image dim."""
    h, w = image.shape[1:]
    mh, mw = rmap.shape
    scaled = np.clip(rmap, 0.0, 1.0)
    rows = (np.arange(h) * mh) // h
    cols = (np.arange(w) * mw) // w
    up = scaled[np.ix_(rows, cols)]
    heat = plt.get_cmap("jet")(up)[..., :3].transpose(2, 0, 1)
    base = 0.45 * image
    return np.clip(base + 0.55 * up[None, :, :] * heat, 0.0, 1.0)


def write_topk_grids(
    dataset,
    backbone,
    bank: PrototypeBank,
    seg_config: SegmentationConfig,
    responses: np.ndarray,
    ids: list[str],
    top_k: int,
    out_dir,
) -> list[str]:
    """Per prototype, a row of the top-k responding samples with their
    response maps blended over the raw images."""
    import torch

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    backbone.eval()
    files = []
    slots = list(bank.slot_index)
    for col, slot in enumerate(slots):
        layer, seg = slot
        proto = bank.prototypes[slot]
        order = np.argsort(-responses[:, col])[:top_k]
        fig, axes = plt.subplots(1, len(order), figsize=(2.1 * len(order), 2.4))
        if len(order) == 1:
            axes = [axes]
        for ax, row in zip(axes, order):
            sid = ids[row]
            image = dataset.raw_image(sid)
            with torch.no_grad():
                feats = backbone(torch.from_numpy(dataset.model_input(sid)).unsqueeze(0))
            segment = split_segments(feats[layer - 1], seg_config, layer)[seg - 1]
            rmap = response_map(segment, proto)
            ax.imshow(_overlay(image, rmap).transpose(1, 2, 0))
            ax.set_title(f"{sid}\n{responses[row, col]:.3f}", fontsize=7)
            ax.axis("off")
        fig.suptitle(f"layer {layer} segment {seg}" + (" (degenerate)" if proto.degenerate else ""), fontsize=9)
        fig.tight_layout()
        path = out_dir / f"layer{layer}_segment{seg}_top{top_k}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        files.append(str(path))
    return files


def null_prototype_report(responses: np.ndarray, slots, threshold: float) -> dict:
    """Slots whose maximum dataset response stays below the threshold are
    surfaced as null concepts (the layer learned fewer concepts than slots)."""
    max_response = responses.max(axis=0)
    nulls = [
        {"slot": slot_name(slot), "max_response": float(mr)}
        for slot, mr in zip(slots, max_response)
        if mr < threshold
    ]
    return {"threshold": threshold, "null_prototypes": nulls}
