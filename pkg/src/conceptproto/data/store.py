"""Artifact store: a manifest.json plus named raw little-endian float32
arrays. Human-inspectable, diff-friendly, and bitwise-stable across
save/load cycles."""

from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from ..errors import CorruptArtifactError
from ..backbone import BackboneSpec, build_backbone
from ..distribution import ClassCentroidSet
from ..prototypes import ConceptPrototype, PrototypeBank
from ..segmentation import SegmentationConfig

if TYPE_CHECKING:
    from ..training import TrainState

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


class ArtifactStore:
    """Directory-backed store. Arrays live under arrays/<name>.f32 and are
    registered in the manifest with their exact shapes."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    def write(self, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        registry = {}
        for name, arr in arrays.items():
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            rel = f"arrays/{name}.f32"
            path = self.root / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(arr32.tobytes())
            registry[name] = {"file": rel, "shape": list(arr32.shape)}
        manifest = dict(manifest)
        manifest["format"] = FORMAT_VERSION
        manifest["arrays"] = registry
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    def read_manifest(self) -> dict:
        if not self.exists():
            raise CorruptArtifactError(f"no {MANIFEST_NAME} under {self.root}")
        return json.loads(self.manifest_path.read_text())

    def read_array(self, name: str, manifest: dict | None = None) -> np.ndarray:
        manifest = manifest or self.read_manifest()
        entry = manifest.get("arrays", {}).get(name)
        if entry is None:
            raise CorruptArtifactError(f"array {name!r} not registered in manifest")
        shape = tuple(entry["shape"])
        expected = 4 * int(np.prod(shape)) if shape else 4
        data = (self.root / entry["file"]).read_bytes()
        if len(data) != expected:
            raise CorruptArtifactError(
                f"array {name!r}: {len(data)} bytes on disk but shape {shape} needs {expected} (4 bytes per element)"
            )
        return np.frombuffer(data, dtype="<f4").reshape(shape).copy()


def _slot_name(layer: int, segment: int) -> str:
    return f"L{layer}S{segment}"


def save_train_state(store: ArtifactStore, state: "TrainState", config_snapshot: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for key, tensor in state.backbone.state_dict().items():
        arrays[f"backbone/{key}"] = tensor.detach().cpu().numpy()

    proto_meta = {}
    for (layer, seg), proto in state.bank.prototypes.items():
        name = _slot_name(layer, seg)
        arrays[f"prototypes/{name}"] = proto.direction
        proto_meta[name] = {"eigenvalue": proto.eigenvalue, "degenerate": proto.degenerate}

    labels = state.centroids.labels
    for i, label in enumerate(labels):
        arrays[f"centroids/{i:03d}"] = state.centroids.centroids[label]

    manifest = {
        "epoch": state.epoch,
        "bank_version": state.bank.epoch_version,
        "centroid_version": state.centroids.epoch_version,
        "classes": list(labels),
        "sample_counts": {c: state.centroids.sample_counts.get(c, 0) for c in labels},
        "slot_index": [list(s) for s in state.bank.slot_index],
        "prototypes": proto_meta,
        "backbone": state.backbone.spec.to_dict(),
        "segmentation": {
            "layer_channels": list(state.seg_config.layer_channels),
            "segment_channels": list(state.seg_config.segment_channels),
        },
        "loss_history": [[h.epoch, h.cka, h.ccd, h.total] for h in state.loss_history],
        "config": config_snapshot or {},
    }
    store.write(manifest, arrays)


def load_train_state(store: ArtifactStore) -> tuple["TrainState", dict]:
    """Rebuild a TrainState; returns it with the stored config snapshot."""
    from ..training import EpochLosses, TrainState

    manifest = store.read_manifest()
    spec = BackboneSpec.from_dict(manifest["backbone"])
    backbone = build_backbone(spec)
    reference = backbone.state_dict()
    state_dict = {}
    for name, entry in manifest["arrays"].items():
        if name.startswith("backbone/"):
            key = name[len("backbone/") :]
            loaded = torch.from_numpy(store.read_array(name, manifest))
            # integer buffers (batch-norm step counters) are stored as f32;
            # their values are small integers, so the cast is exact
            state_dict[key] = loaded.to(reference[key].dtype)
    backbone.load_state_dict(state_dict)

    seg = manifest["segmentation"]
    seg_config = SegmentationConfig(tuple(seg["layer_channels"]), tuple(seg["segment_channels"]))

    prototypes = {}
    for layer, segment in (tuple(s) for s in manifest["slot_index"]):
        name = _slot_name(layer, segment)
        meta = manifest["prototypes"][name]
        prototypes[(layer, segment)] = ConceptPrototype(
            direction=store.read_array(f"prototypes/{name}", manifest).astype(np.float64),
            layer=layer,
            segment=segment,
            eigenvalue=float(meta["eigenvalue"]),
            degenerate=bool(meta["degenerate"]),
        )
    bank = PrototypeBank(prototypes, epoch_version=int(manifest["bank_version"]))

    labels = list(manifest["classes"])
    centroids = ClassCentroidSet(
        centroids={
            label: store.read_array(f"centroids/{i:03d}", manifest).astype(np.float64)
            for i, label in enumerate(labels)
        },
        sample_counts={c: int(n) for c, n in manifest["sample_counts"].items()},
        slots=tuple(tuple(s) for s in manifest["slot_index"]),
        epoch_version=int(manifest["centroid_version"]),
    )

    history = [EpochLosses(int(e), float(a), float(b), float(t)) for e, a, b, t in manifest.get("loss_history", [])]
    state = TrainState(
        backbone=backbone,
        seg_config=seg_config,
        bank=bank,
        centroids=centroids,
        epoch=int(manifest["epoch"]),
        loss_history=history,
        classes=tuple(labels),
    )
    return state, manifest.get("config", {})
