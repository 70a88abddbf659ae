"""Channel-wise partition of layer feature maps into concept segments."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ShapeMismatchError

SlotKey = tuple[int, int]  # (layer, segment), both 1-based


@dataclass(frozen=True)
class SegmentationConfig:
    """Per-layer channel widths and segment widths.

    `segment_channels[i]` channels form one segment of layer i+1; every
    layer's channel count must be an exact multiple of its segment width.
    """

    layer_channels: tuple[int, ...]
    segment_channels: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_channels) != len(self.segment_channels):
            raise ConfigurationError(
                f"{len(self.layer_channels)} layers but {len(self.segment_channels)} segment widths"
            )
        for layer, (c, cp) in enumerate(zip(self.layer_channels, self.segment_channels), start=1):
            if cp <= 0 or c <= 0:
                raise ConfigurationError(f"layer {layer}: channel counts must be positive (C={c}, C'={cp})")
            if c % cp != 0:
                raise ConfigurationError(
                    f"layer {layer}: C={c} is not divisible by segment width C'={cp}"
                )

    @classmethod
    def uniform(cls, layer_channels, segment_channels: int) -> "SegmentationConfig":
        """One shared segment width for every layer."""
        chans = tuple(int(c) for c in layer_channels)
        return cls(chans, (int(segment_channels),) * len(chans))

    @property
    def num_layers(self) -> int:
        return len(self.layer_channels)

    def segments_in_layer(self, layer: int) -> int:
        return self.layer_channels[layer - 1] // self.segment_channels[layer - 1]

    def slot_index(self) -> tuple[SlotKey, ...]:
        """Canonical slot order: layers ascending, segments ascending."""
        return tuple(
            (layer, seg)
            for layer in range(1, self.num_layers + 1)
            for seg in range(1, self.segments_in_layer(layer) + 1)
        )

    @property
    def num_slots(self) -> int:
        return len(self.slot_index())


def split_segments(features: torch.Tensor, config: SegmentationConfig, layer: int) -> list[torch.Tensor]:
    """Slice a B x C x H x W feature block into contiguous channel segments.

    Segment i (1-based) holds channels [(i-1)*C', i*C'); concatenating the
    returned list along the channel axis reconstructs the input exactly.
    """
    features = torch.as_tensor(features)
    if features.ndim != 4:
        raise ShapeMismatchError(f"expected B x C x H x W features, got shape {tuple(features.shape)}")
    c = features.shape[1]
    expected = config.layer_channels[layer - 1]
    if c != expected:
        raise ConfigurationError(f"layer {layer}: feature block has C={c}, config says C={expected}")
    width = config.segment_channels[layer - 1]
    return [features[:, i : i + width] for i in range(0, c, width)]


def flatten_for_cka(segment: torch.Tensor) -> torch.Tensor:
    """Row-major per-sample flattening: B x C' x H x W -> B x (C'*H*W)."""
    segment = torch.as_tensor(segment)
    if segment.ndim != 4:
        raise ShapeMismatchError(f"expected B x C' x H x W segment, got shape {tuple(segment.shape)}")
    return segment.reshape(segment.shape[0], -1)
