"""Boxes, tubelets and the offset codec.

Boxes use the corner convention ``(x1, y1, x2, y2)`` in continuous pixel
coordinates.  Array helpers accept any leading shape ``(..., 4)``.

Offsets follow the usual R-CNN parameterization::

    tx = (cx_t - cx_a) / w_a      tw = log(w_t / w_a)
    ty = (cy_t - cy_a) / h_a      th = log(h_t / h_a)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FrameBounds = tuple[float, float]  # (width, height)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box corners: {self}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box":
        return cls(*(float(v) for v in arr))

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return (self.x1 + self.x2) / 2.0

    @property
    def cy(self) -> float:
        return (self.y1 + self.y2) / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def as_boxes(boxes) -> np.ndarray:
    """Coerce a Box, a sequence of Boxes or an array into a float64 ``(..., 4)`` array."""
    if isinstance(boxes, Box):
        return boxes.as_array()
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.shape[-1] != 4:
        raise ValueError(f"boxes must have a trailing dimension of 4, got {arr.shape}")
    return arr


def iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of two broadcastable ``(..., 4)`` box arrays.

    Pairs whose union is empty (both degenerate) get IoU 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = np.asarray(area_a + area_b - inter)
    return np.divide(inter, union, out=np.zeros(union.shape), where=union > 0.0)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix between ``(N, 4)`` and ``(M, 4)`` box sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return iou(a[:, None, :], b[None, :, :])


def box_iou(a: Box, b: Box) -> float:
    return float(iou(a.as_array(), b.as_array()))


@dataclass
class Tubelet:
    """Per-frame boxes over the contiguous range ``[start_frame, start_frame + len)``.

    ``padding`` marks frames that were filled in beyond the video boundary;
    they carry a box but are excluded from losses and metrics.
    """

    start_frame: int
    boxes: np.ndarray
    padding: np.ndarray = field(default=None)

    def __post_init__(self):
        self.boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) == 0:
            raise ValueError("a tubelet needs at least one frame")
        if self.padding is None:
            self.padding = np.zeros(len(self.boxes), dtype=bool)
        else:
            self.padding = np.array(self.padding, dtype=bool).reshape(-1)
            if self.padding.shape != (len(self.boxes),):
                raise ValueError("padding mask length does not match the boxes")
        self.start_frame = int(self.start_frame)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        """One past the last covered frame."""
        return self.start_frame + len(self.boxes)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.start_frame, self.end_frame)

    @property
    def valid(self) -> np.ndarray:
        return ~self.padding

    def covers(self, start: int, stop: int) -> bool:
        return self.start_frame <= start and stop <= self.end_frame

    def box(self, frame: int) -> Box:
        return Box.from_array(self.boxes[frame - self.start_frame])

    def segment(self, start: int, stop: int) -> "Tubelet":
        """Sub-tubelet over absolute frames ``[start, stop)``."""
        if not self.covers(start, stop) or stop <= start:
            raise ValueError(
                f"frames [{start}, {stop}) outside tubelet [{self.start_frame}, {self.end_frame})"
            )
        lo, hi = start - self.start_frame, stop - self.start_frame
        return Tubelet(start, self.boxes[lo:hi].copy(), self.padding[lo:hi].copy())

    def boxes_on(self, start: int, stop: int) -> np.ndarray:
        lo, hi = start - self.start_frame, stop - self.start_frame
        return self.boxes[lo:hi]

    def copy(self) -> "Tubelet":
        return Tubelet(self.start_frame, self.boxes.copy(), self.padding.copy())

    @staticmethod
    def concat(parts: Iterable["Tubelet"]) -> "Tubelet":
        parts = list(parts)
        for prev, nxt in zip(parts, parts[1:]):
            if prev.end_frame != nxt.start_frame:
                raise ValueError("tubelets to concatenate must be temporally contiguous")
        return Tubelet(
            parts[0].start_frame,
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.padding for p in parts]),
        )


def tubelet_overlap(a: Tubelet, b: Tubelet, clip_range: tuple[int, int]) -> float:
    """Mean per-frame IoU of two tubelets over the frames ``[start, stop)``."""
    start, stop = clip_range
    if stop <= start:
        raise ValueError(f"empty clip range {clip_range}")
    if not (a.covers(start, stop) and b.covers(start, stop)):
        raise ValueError(f"both tubelets must cover frames [{start}, {stop})")
    return float(iou(a.boxes_on(start, stop), b.boxes_on(start, stop)).mean())


def clamp_boxes(boxes: np.ndarray, bounds: FrameBounds) -> np.ndarray:
    w, h = bounds
    out = np.maximum(np.asarray(boxes, dtype=np.float64), 0.0)
    np.minimum(out, (w, h, w, h), out=out)
    return out


def encode_boxes(targets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Offsets ``(..., 4)`` taking each anchor onto its target box."""
    t = np.asarray(targets, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    wa, ha = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    wt, ht = t[..., 2] - t[..., 0], t[..., 3] - t[..., 1]
    if min(wa.min(initial=1.0), ha.min(initial=1.0)) <= 0:
        raise ValueError("cannot encode against a zero-size anchor")
    if min(wt.min(initial=1.0), ht.min(initial=1.0)) <= 0:
        raise ValueError("cannot encode a zero-size target")
    tx = ((t[..., 0] + t[..., 2]) - (a[..., 0] + a[..., 2])) / (2.0 * wa)
    ty = ((t[..., 1] + t[..., 3]) - (a[..., 1] + a[..., 3])) / (2.0 * ha)
    return np.stack([tx, ty, np.log(wt / wa), np.log(ht / ha)], axis=-1)


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray, bounds: FrameBounds | None = None) -> np.ndarray:
    """Inverse of :func:`encode_boxes`, optionally clamped to ``bounds = (W, H)``."""
    d = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    wa, ha = a[..., 2] - a[..., 0], a[..., 3] - a[..., 1]
    cx = (a[..., 0] + a[..., 2]) / 2.0 + d[..., 0] * wa
    cy = (a[..., 1] + a[..., 3]) / 2.0 + d[..., 1] * ha
    w = wa * np.exp(d[..., 2])
    h = ha * np.exp(d[..., 3])
    out = np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=-1)
    if bounds is not None:
        out = clamp_boxes(out, bounds)
    return out


def encode(target: Box, anchor: Box) -> tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(target.as_array(), anchor.as_array()))


def decode(offsets: Sequence[float], anchor: Box, image_bounds: FrameBounds | None = None) -> Box:
    return Box.from_array(decode_boxes(np.asarray(offsets), anchor.as_array(), image_bounds))


def miut(boxes) -> float:
    """Minimum IoU between the center-frame box and every box of a tube.

    The center frame is index ``len // 2`` (lower median for even lengths).
    Accepts a ground-truth tube, a tubelet or a ``(T, 4)`` array.
    """
    arr = as_boxes(getattr(boxes, "boxes", boxes)).reshape(-1, 4)
    if len(arr) == 0:
        raise ValueError("miut of an empty tube")
    if len(arr) == 1:
        return 1.0
    center = arr[len(arr) // 2]
    return float(iou(arr, center[None, :]).min())
