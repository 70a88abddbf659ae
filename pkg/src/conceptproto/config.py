"""Run configuration: a flat `key = value` text format with dotted section
prefixes, parsed into one dataclass that every harness shares. The full key
reference lives in docs/config_reference.md."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

from .backbone import BackboneSpec
from .distribution import CCDParams
from .errors import ConfigurationError
from .segmentation import SegmentationConfig
from .training import TrainConfig
from .data.manifest import DatasetManifest, Preprocessing, synthetic_manifest


@dataclass(frozen=True)
class DataSpec:
    """Either a manifest file on disk or an inline synthetic generator."""

    manifest: str | None = None
    generator: str | None = None
    classes: tuple[str, ...] | None = None
    per_class: int = 100
    image_size: int = 64
    seed: int = 0
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def resolve(self, name: str, base_dir: Path | None = None) -> tuple[DatasetManifest, Preprocessing]:
        pre = Preprocessing(image_size=self.image_size, mean=self.mean, std=self.std)
        if self.manifest:
            path = Path(self.manifest)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return DatasetManifest.load(path), pre
        if self.generator:
            if self.generator != "shapes":
                raise ConfigurationError(f"unknown generator {self.generator!r}")
            return (
                synthetic_manifest(name, self.per_class, self.seed, self.image_size, self.classes),
                pre,
            )
        raise ConfigurationError("data section needs either 'manifest' or 'generator'")


@dataclass(frozen=True)
class ExplainConfig:
    top_k: int = 5
    null_threshold: float = 0.55


@dataclass
class RunConfig:
    seed: int = 7
    data: DataSpec = field(default_factory=DataSpec)
    eval: DataSpec | None = None
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 2)
    segment_channels: int | tuple[int, ...] = 8
    loss_mode: str = "both"
    ccd_margin: float = 0.01
    ccd_weight: float = 100.0
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 40
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    base_dir: str | None = None

    def backbone_spec(self) -> BackboneSpec:
        return BackboneSpec(
            channels=self.backbone_channels,
            strides=self.backbone_strides,
            seed=self.seed,
        )

    def segmentation(self) -> SegmentationConfig:
        if isinstance(self.segment_channels, tuple):
            return SegmentationConfig(self.backbone_channels, self.segment_channels)
        return SegmentationConfig.uniform(self.backbone_channels, self.segment_channels)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every=self.lr_decay_every,
            segment_channels=self.segment_channels,
            ccd=CCDParams(margin=self.ccd_margin, loss_weight=self.ccd_weight),
            loss_mode=self.loss_mode,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = asdict(self.data)
        d["eval"] = asdict(self.eval) if self.eval else None
        d["explain"] = asdict(self.explain)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def _data(sub):
            if sub is None:
                return None
            sub = dict(sub)
            for key in ("classes",):
                if sub.get(key) is not None:
                    sub[key] = tuple(sub[key])
            for key in ("mean", "std"):
                if key in sub:
                    sub[key] = tuple(sub[key])
            return DataSpec(**sub)

        d = dict(d)
        d["data"] = _data(d.get("data")) or DataSpec()
        d["eval"] = _data(d.get("eval"))
        d["explain"] = ExplainConfig(**d.get("explain", {})) if d.get("explain") else ExplainConfig()
        for key in ("backbone_channels", "backbone_strides"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("segment_channels"), list):
            d["segment_channels"] = tuple(d["segment_channels"])
        return cls(**d)


def _parse_value(raw: str):
    raw = raw.strip()
    if "," in raw:
        return tuple(_parse_value(part) for part in raw.split(",") if part.strip())
    lowered = raw.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines; '#' starts a comment, commas make tuples."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


_KEY_MAP = {
    "seed": "seed",
    "backbone.channels": "backbone_channels",
    "backbone.strides": "backbone_strides",
    "segments.channels": "segment_channels",
    "loss.mode": "loss_mode",
    "loss.margin": "ccd_margin",
    "loss.weight": "ccd_weight",
    "train.epochs": "epochs",
    "train.batch_size": "batch_size",
    "train.learning_rate": "learning_rate",
    "train.weight_decay": "weight_decay",
    "train.lr_decay_factor": "lr_decay_factor",
    "train.lr_decay_every": "lr_decay_every",
    "explain.top_k": ("explain", "top_k"),
    "explain.null_threshold": ("explain", "null_threshold"),
}

_DATA_KEYS = {
    "manifest": "manifest",
    "generator": "generator",
    "classes": "classes",
    "per_class": "per_class",
    "image_size": "image_size",
    "seed": "seed",
    "mean": "mean",
    "std": "std",
}


def _coerce_tuple(value):
    return value if isinstance(value, tuple) else (value,)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    values = parse_config_text(path.read_text())

    cfg_kwargs: dict = {}
    data_kwargs: dict = {}
    eval_kwargs: dict = {}
    explain_kwargs: dict = {}
    unknown = []
    for key, value in values.items():
        if key in _KEY_MAP:
            target = _KEY_MAP[key]
            if isinstance(target, tuple):
                explain_kwargs[target[1]] = value
            else:
                cfg_kwargs[target] = value
        elif key.startswith("data.") and key[5:] in _DATA_KEYS:
            data_kwargs[_DATA_KEYS[key[5:]]] = value
        elif key.startswith("eval.") and key[5:] in _DATA_KEYS:
            eval_kwargs[_DATA_KEYS[key[5:]]] = value
        else:
            unknown.append(key)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")

    for kwargs in (data_kwargs, eval_kwargs):
        for tup_key in ("classes", "mean", "std"):
            if tup_key in kwargs:
                kwargs[tup_key] = _coerce_tuple(kwargs[tup_key])
    for tup_key in ("backbone_channels", "backbone_strides"):
        if tup_key in cfg_kwargs:
            cfg_kwargs[tup_key] = _coerce_tuple(cfg_kwargs[tup_key])

    cfg_kwargs["data"] = DataSpec(**data_kwargs) if data_kwargs else DataSpec()
    cfg_kwargs["eval"] = DataSpec(**eval_kwargs) if eval_kwargs else None
    if explain_kwargs:
        cfg_kwargs["explain"] = ExplainConfig(**explain_kwargs)
    cfg_kwargs["base_dir"] = str(path.parent)
    return RunConfig(**cfg_kwargs)
