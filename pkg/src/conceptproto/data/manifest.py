"""Dataset manifests and loaders.

Three source kinds share one batch contract: image directories (PNG/JPEG
files listed per sample), synthetic generators (samples rendered on the
fly), and feature archives (per-layer feature maps that bypass the
backbone entirely). Batches are (x, labels, ids) where x is an image
tensor or, for archives, a list of per-layer feature tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import IngestionError
from . import shapes
from .archive import FeatureArchive, load_archive

SOURCE_KINDS = ("image-directory", "feature-archive", "synthetic")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: str
    path: str | None = None
    index: int | None = None  # generator or archive row index


@dataclass(frozen=True)
class Preprocessing:
    """Fixed, deterministic input pipeline: resize, scale to [0, 1],
    per-channel standardization."""

    image_size: int = 64
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class DatasetManifest:
    name: str
    source: str
    classes: tuple[str, ...]
    samples: tuple[SampleRecord, ...] = ()
    generator: dict | None = None
    archive: str | None = None
    root: str | None = None

    def __post_init__(self):
        problems = []
        if self.source not in SOURCE_KINDS:
            problems.append(f"unknown source kind {self.source!r}")
        seen_ids = set()
        classes = set(self.classes)
        for rec in self.samples:
            if rec.id in seen_ids:
                problems.append(f"duplicate sample id {rec.id!r}")
            seen_ids.add(rec.id)
            if rec.label not in classes:
                problems.append(f"sample {rec.id!r} has label {rec.label!r} outside the class set")
        if problems:
            raise IngestionError("invalid manifest: " + "; ".join(problems))

    def to_dict(self) -> dict:
        d = {"name": self.name, "source": self.source, "classes": list(self.classes)}
        if self.generator is not None:
            d["generator"] = self.generator
        if self.archive is not None:
            d["archive"] = self.archive
        if self.samples:
            d["samples"] = [
                {k: v for k, v in {"id": r.id, "label": r.label, "path": r.path, "index": r.index}.items() if v is not None}
                for r in self.samples
            ]
        return d

    @classmethod
    def from_dict(cls, d: dict, root: str | None = None) -> "DatasetManifest":
        samples = tuple(
            SampleRecord(id=s["id"], label=s["label"], path=s.get("path"), index=s.get("index"))
            for s in d.get("samples", [])
        )
        return cls(
            name=d.get("name", "dataset"),
            source=d["source"],
            classes=tuple(d["classes"]),
            samples=samples,
            generator=d.get("generator"),
            archive=d.get("archive"),
            root=root,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise IngestionError(f"cannot read manifest {path}: {e}") from e
        return cls.from_dict(d, root=str(path.parent))


def synthetic_manifest(
    name: str,
    per_class: int,
    seed: int,
    image_size: int = 64,
    classes: tuple[str, ...] | None = None,
) -> DatasetManifest:
    """Manifest for the bundled shapes generator, samples materialized."""
    classes = tuple(classes) if classes else shapes.CLASSES
    unknown = [c for c in classes if c not in shapes.CLASSES]
    if unknown:
        raise IngestionError(f"generator has no classes {unknown}; available: {list(shapes.CLASSES)}")
    samples = tuple(
        SampleRecord(id=f"{label}-{i:04d}", label=label, index=i)
        for label in classes
        for i in range(per_class)
    )
    return DatasetManifest(
        name=name,
        source="synthetic",
        classes=classes,
        samples=samples,
        generator={"kind": "shapes", "per_class": per_class, "seed": seed, "image_size": image_size},
    )


class Dataset:
    """Loaded dataset with deterministic batch iteration."""

    def __init__(self, manifest: DatasetManifest, preprocessing: Preprocessing | None = None):
        self.manifest = manifest
        self.preprocessing = preprocessing or Preprocessing()
        self.classes = tuple(manifest.classes)
        self._archive: FeatureArchive | None = None
        self._archive_row: dict[str, int] = {}

        if manifest.source == "synthetic":
            gen = manifest.generator or {}
            if gen.get("kind", "shapes") != "shapes":
                raise IngestionError(f"unknown generator kind {gen.get('kind')!r}")
            if manifest.samples:
                self.samples = list(manifest.samples)
            else:
                per_class = int(gen.get("per_class", 0))
                if per_class <= 0:
                    raise IngestionError("synthetic manifest needs samples or generator.per_class")
                self.samples = list(
                    synthetic_manifest(manifest.name, per_class, int(gen.get("seed", 0)),
                                       classes=self.classes).samples
                )
            self._gen_seed = int(gen.get("seed", 0))
            self._gen_size = int(gen.get("image_size", self.preprocessing.image_size))
        elif manifest.source == "image-directory":
            self.samples = list(manifest.samples)
            root = Path(manifest.root or ".")
            missing = [str(root / r.path) for r in self.samples if not (root / r.path).is_file()]
            if missing:
                raise IngestionError(f"{len(missing)} referenced files missing, e.g. {missing[:3]}")
            self._root = root
        elif manifest.source == "feature-archive":
            if not manifest.archive:
                raise IngestionError("feature-archive manifest needs an 'archive' path")
            root = Path(manifest.root or ".")
            self._archive = load_archive(root / manifest.archive)
            self._archive_row = {sid: i for i, sid in enumerate(self._archive.ids)}
            if manifest.samples:
                self.samples = list(manifest.samples)
                missing = [r.id for r in self.samples if r.id not in self._archive_row]
                if missing:
                    raise IngestionError(f"archive lacks samples {missing[:5]}")
            else:
                self.samples = [
                    SampleRecord(id=sid, label=lab, index=i)
                    for i, (sid, lab) in enumerate(zip(self._archive.ids, self._archive.labels))
                ]
        else:
            raise IngestionError(f"unknown source kind {manifest.source!r}")

    @property
    def source(self) -> str:
        return self.manifest.source

    @property
    def has_images(self) -> bool:
        return self.manifest.source != "feature-archive"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.samples]

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.samples]

    def subset(self, ids) -> "Dataset":
        """View over a subset of sample ids, preserving order of `ids`."""
        by_id = {r.id: r for r in self.samples}
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise IngestionError(f"unknown sample ids {missing[:5]}")
        clone = object.__new__(Dataset)
        clone.__dict__.update(self.__dict__)
        clone.samples = [by_id[i] for i in ids]
        return clone

    def raw_image(self, sample_id: str) -> np.ndarray:
        """3 x H x W float image in [0, 1], before standardization (for overlays)."""
        rec = next((r for r in self.samples if r.id == sample_id), None)
        if rec is None:
            raise IngestionError(f"unknown sample id {sample_id!r}")
        if self.manifest.source == "synthetic":
            return shapes.generate(rec.label, self._gen_size, self._gen_seed, rec.index)
        if self.manifest.source == "image-directory":
            return self._load_file(rec)
        raise IngestionError("feature archives carry no images")

    def _load_file(self, rec: SampleRecord) -> np.ndarray:
        from PIL import Image

        size = self.preprocessing.image_size
        try:
            with Image.open(self._root / rec.path) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except OSError as e:
            raise IngestionError(f"cannot load image for sample {rec.id!r}: {e}") from e
        return arr.transpose(2, 0, 1)

    def _standardize(self, img: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.preprocessing.mean, dtype=np.float32)[:, None, None]
        std = np.asarray(self.preprocessing.std, dtype=np.float32)[:, None, None]
        return (img - mean) / std

    def model_input(self, sample_id: str) -> np.ndarray:
        """Standardized 3 x H x W array, exactly what batches feed the backbone."""
        return self._standardize(self.raw_image(sample_id).astype(np.float32))

    def _image_batch(self, records: list[SampleRecord]) -> torch.Tensor:
        imgs = []
        for rec in records:
            raw = self.raw_image(rec.id)
            imgs.append(self._standardize(raw.astype(np.float32)))
        return torch.from_numpy(np.stack(imgs))

    def _feature_batch(self, records: list[SampleRecord]) -> list[torch.Tensor]:
        rows = [self._archive_row[r.id] for r in records]
        return [torch.from_numpy(layer[rows]) for layer in self._archive.layer_arrays]

    def iter_batches(self, batch_size: int, shuffle_seed: int | None = None, min_batch: int = 1):
        """Yield (x, labels, ids); order is the manifest order unless a
        shuffle seed is given. Tail batches below `min_batch` are dropped."""
        order = np.arange(len(self.samples))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(order)
        for start in range(0, len(order), batch_size):
            chunk = [self.samples[i] for i in order[start : start + batch_size]]
            if len(chunk) < min_batch:
                continue
            if self._archive is not None:
                x = self._feature_batch(chunk)
            else:
                x = self._image_batch(chunk)
            yield x, [r.label for r in chunk], [r.id for r in chunk]


def load_dataset(manifest, preprocessing: Preprocessing | None = None) -> Dataset:
    """Accepts a DatasetManifest or a path to a manifest JSON file."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    return Dataset(manifest, preprocessing)
