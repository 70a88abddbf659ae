"""Synthetic shapes dataset: {circle, square, triangle} x {warm, cool}.

Color (low-level cue) and geometry (high-level cue) are independent by
construction, so explanations should attribute palette to early layers and
shape to late layers. Position, scale, rotation, background level, and
palette hue are all jittered per sample; generation is deterministic given
(dataset seed, class, sample index).
"""

from __future__ import annotations

import numpy as np

SHAPES = ("circle", "square", "triangle")
PALETTES = ("warm", "cool")
CLASSES = tuple(f"{shape}_{palette}" for shape in SHAPES for palette in PALETTES)

_HUE_RANGES = {"warm": (0.00, 0.13), "cool": (0.50, 0.78)}


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[float, float, float]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _signed_distance(shape: str, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = rng.uniform(0.38, 0.62) * size
    cy = rng.uniform(0.38, 0.62) * size
    radius = rng.uniform(0.22, 0.34) * size
    # mild rotation jitter: shape identity must stay learnable at toy scale
    theta = rng.uniform(-0.35, 0.35)
    dx, dy = xs - cx, ys - cy

    if shape == "circle":
        return np.hypot(dx, dy) - radius
    if shape == "square":
        u = np.cos(theta) * dx + np.sin(theta) * dy
        v = -np.sin(theta) * dx + np.cos(theta) * dy
        return np.maximum(np.abs(u), np.abs(v)) - radius * 0.82
    if shape == "triangle":
        # Equilateral with circumradius `radius`; inside iff every edge
        # half-plane constraint holds (inradius is half the circumradius).
        planes = []
        for k in range(3):
            ang = theta + np.pi / 2.0 + k * (2.0 * np.pi / 3.0)
            planes.append(np.cos(ang) * dx + np.sin(ang) * dy)
        return np.maximum.reduce(planes) - radius * 0.5
    raise ValueError(f"unknown shape {shape!r}")


def render_sample(class_name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One 3 x size x size float32 image in [0, 1]."""
    shape, palette = class_name.rsplit("_", 1)
    lo, hi = _HUE_RANGES[palette]
    color = _hsv_to_rgb(rng.uniform(lo, hi) % 1.0, rng.uniform(0.75, 1.0), rng.uniform(0.80, 1.0))

    sdf = _signed_distance(shape, size, rng)
    alpha = np.clip(0.5 - sdf, 0.0, 1.0)  # one-pixel feathered edge

    background = rng.uniform(0.15, 0.32)
    img = np.empty((3, size, size), dtype=np.float64)
    for c in range(3):
        img[c] = background * (1.0 - alpha) + color[c] * alpha
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate(class_name: str, size: int, dataset_seed: int, index: int) -> np.ndarray:
    """Deterministic sample: the RNG stream depends only on (seed, class, index)."""
    if class_name not in CLASSES:
        raise ValueError(f"unknown class {class_name!r}; expected one of {CLASSES}")
    rng = np.random.default_rng([dataset_seed, CLASSES.index(class_name), index])
    return render_sample(class_name, size, rng)
