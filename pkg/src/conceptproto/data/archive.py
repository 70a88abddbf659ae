"""Feature archives: per-layer feature maps stored as raw little-endian
float32 arrays plus a JSON manifest, so extraction and classification can
run without a backbone."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import CorruptArtifactError, IngestionError

MANIFEST_NAME = "archive.json"


@dataclass
class FeatureArchive:
    """N samples' features for every layer: layer_arrays[l] is N x C_l x H_l x W_l."""

    layer_arrays: list[np.ndarray]
    ids: list[str]
    labels: list[str]
    classes: tuple[str, ...]

    def __post_init__(self):
        n = len(self.ids)
        if len(self.labels) != n:
            raise IngestionError(f"{len(self.labels)} labels for {n} ids")
        for i, arr in enumerate(self.layer_arrays):
            if arr.ndim != 4 or arr.shape[0] != n:
                raise IngestionError(f"layer {i + 1} array has shape {arr.shape}, expected {n} x C x H x W")


def save_archive(directory, archive: FeatureArchive) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, arr in enumerate(archive.layer_arrays):
        fname = f"layer{i + 1}.f32"
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        (directory / fname).write_bytes(arr32.tobytes())
        layers.append({"file": fname, "shape": list(arr32.shape)})
    manifest = {
        "classes": list(archive.classes),
        "ids": archive.ids,
        "labels": archive.labels,
        "layers": layers,
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_archive(directory) -> FeatureArchive:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise IngestionError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    arrays = []
    for entry in manifest["layers"]:
        shape = tuple(entry["shape"])
        expected = 4 * int(np.prod(shape))
        data = (directory / entry["file"]).read_bytes()
        if len(data) != expected:
            raise CorruptArtifactError(
                f"array {entry['file']!r}: {len(data)} bytes on disk, manifest shape {shape} needs {expected}"
            )
        arrays.append(np.frombuffer(data, dtype="<f4").reshape(shape).copy())
    return FeatureArchive(
        layer_arrays=arrays,
        ids=list(manifest["ids"]),
        labels=list(manifest["labels"]),
        classes=tuple(manifest["classes"]),
    )
