"""Procedurally generated captioned-shapes dataset.

Each sample is a 32x32 RGB image in [-1, 1] of one anti-aliased shape on a
fixed dark background, captioned with the template
"a {color} {shape} on the {position}", plus the exact ground-truth region
mask of the rendered shape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

# Palette hues are spread around the circle so nearest-hue classification of
# the edited region is unambiguous.
PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "orange": (1.0, 0.5, 0.0),
    "yellow": (1.0, 1.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "blue": (0.0, 0.0, 1.0),
    "purple": (0.5, 0.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
}

SHAPES = ("circle", "square", "triangle")

POSITIONS: dict[str, tuple[float, float]] = {
    "left": (0.27, 0.5),
    "right": (0.73, 0.5),
    "top": (0.5, 0.27),
    "bottom": (0.5, 0.73),
    "center": (0.5, 0.5),
}

BACKGROUND = (0.15, 0.15, 0.15)  # in [0, 1]
IMAGE_SIZE = 32
SUPERSAMPLE = 4


@dataclass
class ShapesSample:
    image: Tensor        # (3, 32, 32) float32 in [-1, 1]
    caption: str
    region_mask: Tensor  # (32, 32) bool, pixels with majority shape coverage
    color: str
    shape: str
    position: str
    count: int = 1


def caption_for(color: str, shape: str, position: str) -> str:
    return f"a {color} {shape} on the {position}"


def _coverage(shape: str, cx: float, cy: float, radius: float, size: int = IMAGE_SIZE,
              ss: int = SUPERSAMPLE) -> np.ndarray:
    """Fraction of each pixel covered by the shape, via supersampling."""
    n = size * ss
    coords = (np.arange(n) + 0.5) / ss
    xs, ys = np.meshgrid(coords, coords)
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        inside = dx * dx + dy * dy <= radius * radius
    elif shape == "square":
        half = radius * 0.86
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif shape == "triangle":
        # up-pointing, vertices on the circumcircle of the given radius
        v = np.array([(cx, cy - radius),
                      (cx - radius * np.sqrt(3) / 2, cy + radius / 2),
                      (cx + radius * np.sqrt(3) / 2, cy + radius / 2)])
        inside = np.ones_like(dx, dtype=bool)
        for i in range(3):
            ax, ay = v[i]
            bx, by = v[(i + 1) % 3]
            # vertices wind clockwise in image coordinates (y down)
            cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
            inside &= cross <= 0
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.astype(np.float32).reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_sample(color: str, shape: str, position: str, radius: float,
                  jitter: tuple[float, float] = (0.0, 0.0)) -> tuple[Tensor, Tensor]:
    """Rasterize one shape; returns (image in [-1,1], ground-truth mask)."""
    fx, fy = POSITIONS[position]
    cx = fx * IMAGE_SIZE + jitter[0]
    cy = fy * IMAGE_SIZE + jitter[1]
    cov = _coverage(shape, cx, cy, radius)
    rgb = np.asarray(PALETTE[color], dtype=np.float32)
    bg = np.asarray(BACKGROUND, dtype=np.float32)
    img01 = bg[:, None, None] * (1.0 - cov) + rgb[:, None, None] * cov
    image = torch.from_numpy(img01 * 2.0 - 1.0)
    mask = torch.from_numpy(cov >= 0.5)
    return image, mask


def generate_dataset(n: int, seed: int = 0) -> list[ShapesSample]:
    """Deterministic dataset of n samples with uniform attribute sampling."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    positions = list(POSITIONS)
    samples = []
    for _ in range(n):
        color = colors[rng.integers(len(colors))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        position = positions[rng.integers(len(positions))]
        radius = float(rng.uniform(5.0, 7.5))
        jitter = (float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.5, 1.5)))
        image, mask = render_sample(color, shape, position, radius, jitter)
        samples.append(ShapesSample(image=image, caption=caption_for(color, shape, position),
                                    region_mask=mask, color=color, shape=shape,
                                    position=position))
    return samples


def dataset_hash(samples: list[ShapesSample]) -> str:
    """Stable content hash used in checkpoint manifests."""
    h = hashlib.sha256()
    for s in samples:
        h.update(s.image.numpy().tobytes())
        h.update(s.caption.encode())
    return h.hexdigest()[:16]
