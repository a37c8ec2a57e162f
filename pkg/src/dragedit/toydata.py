"""Synthetic scene generator for the trainable toy model.

Scenes are 32x32 RGB images of one colored shape (circle / square / triangle)
on a dark background, captioned from the model vocabulary, e.g.
"a red circle" or "a big blue square". Values live in [-1, 1].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
import torch

COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.9),
    "yellow": (0.9, 0.85, 0.2),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = (-0.85, -0.85, -0.85)


@dataclass(frozen=True)
class Scene:
    shape: str
    color: str
    size: str            # "big" | "small"
    cx: float            # center, pixel coordinates
    cy: float
    radius: float

    @property
    def caption(self) -> str:
        return f"a {self.size} {self.color} {self.shape}"


def shape_mask(scene: Scene, resolution: int = 32) -> np.ndarray:
    """Binary {0,1} float mask of the shape's interior, [H, W]."""
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    ys, xs = ys + 0.5, xs + 0.5
    r, cx, cy = scene.radius, scene.cx, scene.cy
    if scene.shape == "circle":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= r ** 2
    elif scene.shape == "square":
        inside = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
    elif scene.shape == "triangle":
        # upright triangle: apex at (cx, cy - r), base at cy + r
        top, bottom = cy - r, cy + r
        frac = np.clip((ys - top) / (bottom - top), 0.0, 1.0)
        inside = (ys >= top) & (ys <= bottom) & (np.abs(xs - cx) <= frac * r)
    else:
        raise ValueError(f"unknown shape {scene.shape!r}")
    return inside.astype(np.float32)


def render_scene(scene: Scene, resolution: int = 32) -> torch.Tensor:
    """Render to a [3, H, W] tensor in [-1, 1]."""
    mask = shape_mask(scene, resolution)
    rgb01 = np.array(COLORS[scene.color], dtype=np.float32)
    fg = rgb01 * 2.0 - 1.0
    img = np.empty((3, resolution, resolution), dtype=np.float32)
    for c in range(3):
        img[c] = BACKGROUND[c] * (1.0 - mask) + fg[c] * mask
    return torch.from_numpy(img)


def sample_scene(rng: np.random.Generator, resolution: int = 32) -> Scene:
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    size = "big" if rng.random() < 0.5 else "small"
    radius = float(rng.uniform(6.0, 9.0)) if size == "big" else float(rng.uniform(3.0, 5.0))
    margin = radius + 1.5
    cx = float(rng.uniform(margin, resolution - margin))
    cy = float(rng.uniform(margin, resolution - margin))
    return Scene(shape, color, size, cx, cy, radius)


def scene_stream(seed: int, resolution: int = 32) -> Iterator[Tuple[torch.Tensor, str, Scene]]:
    """Infinite deterministic stream of (image, caption, scene)."""
    rng = np.random.default_rng(seed)
    while True:
        scene = sample_scene(rng, resolution)
        yield render_scene(scene, resolution), scene.caption, scene


def centroid_of_mask(mask: np.ndarray) -> Tuple[float, float]:
    """(cx, cy) centroid of a nonneg mask in pixel coordinates; errors if empty."""
    total = float(mask.sum())
    if total <= 0:
        raise ValueError("mask has no support")
    ys, xs = np.mgrid[0:mask.shape[0], 0:mask.shape[1]].astype(np.float64)
    return (float((xs * mask).sum() / total) + 0.5, float((ys * mask).sum() / total) + 0.5)
