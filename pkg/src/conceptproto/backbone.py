"""Small multi-stage convolutional backbone exposing one feature map per
stage. There is no classifier head: classification happens downstream by
matching concept distributions."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class BackboneSpec:
    """Stage widths and spatial-reduction schedule of the feature extractor."""

    channels: tuple[int, ...] = (16, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ConfigurationError("multi-level extraction needs at least 2 stages")
        if len(self.strides) != len(self.channels):
            raise ConfigurationError(
                f"{len(self.strides)} strides for {len(self.channels)} stages"
            )

    @property
    def num_layers(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "strides": list(self.strides),
            "in_channels": self.in_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            channels=tuple(d["channels"]),
            strides=tuple(d["strides"]),
            in_channels=int(d.get("in_channels", 3)),
            seed=int(d.get("seed", 0)),
        )


class MultiStageBackbone(nn.Module):
    """Stack of stride-reduced conv stages; forward returns every stage's
    feature map, lowest layer first."""

    def __init__(self, spec: BackboneSpec, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.spec = spec
        torch.manual_seed(spec.seed)
        stages = []
        prev = spec.in_channels
        for width, stride in zip(spec.channels, spec.strides):
            stages.append(
                nn.Sequential(
                    # full-resolution conv first, then the strided reduction:
                    # a bare stride-2 3x3 aliases away most spatial detail
                    nn.Conv2d(prev, width, kernel_size=3, stride=1, padding=1),
                    nn.BatchNorm2d(width),
                    nn.SiLU(),  # smooth, so finite-difference gradient checks behave
                    nn.Conv2d(width, width, kernel_size=3, stride=stride, padding=1),
                    nn.BatchNorm2d(width),
                    nn.SiLU(),
                )
            )
            prev = width
        self.stages = nn.ModuleList(stages)
        self.to(dtype)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_backbone(spec: BackboneSpec, dtype: torch.dtype = torch.float32) -> MultiStageBackbone:
    return MultiStageBackbone(spec, dtype=dtype)
