"""Initial proposal sets: sliding-window pyramids replicated into cuboids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Tubelet

_EPS = 1e-9


@dataclass(frozen=True)
class PyramidLevel:
    scale: float  # window = frame size / scale
    overlap: float

    def __post_init__(self):
        if self.scale < 1.0:
            raise ValueError(f"pyramid scale must be >= 1, got {self.scale}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")


@dataclass(frozen=True)
class PyramidSpec:
    levels: tuple[PyramidLevel, ...]
    width: float = 400.0
    height: float = 400.0

    @classmethod
    def from_lists(cls, scales: Sequence[float], overlaps: Sequence[float], width=400.0, height=400.0):
        if len(scales) != len(overlaps):
            raise ValueError("scales and overlaps must have the same length")
        return cls(tuple(PyramidLevel(float(s), float(o)) for s, o in zip(scales, overlaps)), width, height)


AVA_SCALES = (4.0 / 3.0, 2.0)
AVA_OVERLAPS = (5.0 / 6.0, 3.0 / 4.0)


def ava_pyramid(width: float = 400.0, height: float = 400.0) -> PyramidSpec:
    """The two-level pyramid producing 34 windows."""
    return PyramidSpec.from_lists(AVA_SCALES, AVA_OVERLAPS, width, height)


def _positions(extent: float, window: float, stride: float) -> list[float]:
    span = extent - window
    n = int(math.floor(span / stride + _EPS)) + 1
    pos = [i * stride for i in range(n)]
    # flush-edge window when the stride grid stops short of the far edge
    if span - pos[-1] > _EPS * max(1.0, extent):
        pos.append(span)
    return pos


def generate_pyramid(spec: PyramidSpec) -> list[Box]:
    """Sliding windows of every pyramid level, deduplicated, in level/row/column order."""
    boxes: list[Box] = []
    seen: set[tuple[float, ...]] = set()
    for level in spec.levels:
        ww, wh = spec.width / level.scale, spec.height / level.scale
        sx, sy = ww * (1.0 - level.overlap), wh * (1.0 - level.overlap)
        if sx <= 0 or sy <= 0:
            raise ValueError("pyramid stride must be positive")
        for y in _positions(spec.height, wh, sy):
            for x in _positions(spec.width, ww, sx):
                box = Box(x, y, min(x + ww, spec.width), min(y + wh, spec.height))
                key = tuple(round(v, 6) for v in (box.x1, box.y1, box.x2, box.y2))
                if key not in seen:
                    seen.add(key)
                    boxes.append(box)
    return boxes


def default_grid(width: float = 400.0, height: float = 400.0) -> list[Box]:
    """Eleven coarse boxes: the full frame, a 3x3 grid of half-size windows and a centered 3/4 box."""
    boxes = [Box(0.0, 0.0, width, height)]
    boxes += generate_pyramid(PyramidSpec.from_lists([2.0], [0.5], width, height))
    boxes.append(Box.from_center(width / 2, height / 2, 0.75 * width, 0.75 * height))
    return boxes


def replicate_to_cuboids(boxes: Sequence[Box], clip: tuple[int, int]) -> list[Tubelet]:
    """Repeat each 2D box over the frames ``[start, stop)`` of a clip."""
    start, stop = clip
    k = stop - start
    if k < 1:
        raise ValueError(f"clip length must be >= 1, got {k}")
    return [Tubelet(start, np.repeat(b.as_array()[None, :], k, axis=0)) for b in boxes]
