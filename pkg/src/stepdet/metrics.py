"""Frame-level and video-level mAP, mean fusion, NMS and IoU histograms."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Tubelet, iou, miut
from .simulator import overlap_with_tube

VIDEO_THRESHOLDS = (0.05, 0.1, 0.2, 0.5)


@dataclass
class ScoredTubelet:
    """Final per-proposal output: class distribution plus the updated tubelet."""

    probs: np.ndarray
    tubelet: Tubelet


@dataclass(frozen=True)
class FrameDetection:
    video: str
    frame: int
    label: int
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class FrameGT:
    video: str
    frame: int
    label: int
    box: tuple[float, float, float, float]


@dataclass
class APResult:
    per_class: dict[int, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_class.values()))) if self.per_class else 0.0


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP of detections already ranked by score.

    Each recall step is credited with the highest precision reached at any
    equal-or-higher recall.
    """
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


def _rank(scores: Sequence[float]) -> np.ndarray:
    # stable: equal scores keep input order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def greedy_match(det_keys, det_scores, similarities, gt_counts, threshold: float) -> list[bool]:
    """Mark detections TP/FP in score order against not-yet-matched ground truth.

    ``similarities[i]`` holds detection ``i``'s overlap with every ground
    truth sharing its key (``gt_counts[key]`` of them).  A detection takes
    the unmatched one with the best overlap if that reaches ``threshold``.
    """
    used = {key: np.zeros(n, dtype=bool) for key, n in gt_counts.items()}
    tp = []
    for i in _rank(det_scores):
        key = det_keys[i]
        hit = False
        if key in used and len(used[key]):
            sims = np.where(used[key], -np.inf, similarities[i])
            j = int(np.argmax(sims))
            if sims[j] >= threshold:
                used[key][j] = True
                hit = True
        tp.append(hit)
    return tp


def frame_map(detections: Sequence[FrameDetection], gts: Sequence[FrameGT], iou_threshold: float = 0.5) -> APResult:
    """Per-class frame AP; classes without ground truth are left out of the mean."""
    classes = sorted({g.label for g in gts})
    per_class = {}
    for c in classes:
        gt_by_key = defaultdict(list)
        for g in gts:
            if g.label == c:
                gt_by_key[(g.video, g.frame)].append(g.box)
        gt_arrays = {key: np.asarray(v, dtype=np.float64) for key, v in gt_by_key.items()}
        dets = [d for d in detections if d.label == c]
        keys = [(d.video, d.frame) for d in dets]
        sims = [None] * len(dets)
        by_key = defaultdict(list)
        for i, key in enumerate(keys):
            if key in gt_arrays:
                by_key[key].append(i)
        for key, idx in by_key.items():
            m = iou(np.asarray([dets[i].box for i in idx])[:, None, :], gt_arrays[key][None, :, :])
            for row, i in zip(m, idx):
                sims[i] = row
        counts = {key: len(v) for key, v in gt_arrays.items()}
        tp = greedy_match(keys, [d.score for d in dets], sims, counts, iou_threshold)
        per_class[c] = average_precision(tp, sum(counts.values()))
    return APResult(per_class)


@dataclass
class TubeDetection:
    """A video-level detection: class, score and per-frame boxes."""

    video: str
    label: int
    score: float
    start_frame: int
    boxes: np.ndarray

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes)


def tube_iou(a_start: int, a_boxes: np.ndarray, b_start: int, b_boxes: np.ndarray) -> float:
    """Temporal IoU of the frame ranges times the mean spatial IoU over shared frames."""
    a_end, b_end = a_start + len(a_boxes), b_start + len(b_boxes)
    lo, hi = max(a_start, b_start), min(a_end, b_end)
    if hi <= lo:
        return 0.0
    t_iou = (hi - lo) / (max(a_end, b_end) - min(a_start, b_start))
    s_iou = iou(a_boxes[lo - a_start:hi - a_start], b_boxes[lo - b_start:hi - b_start]).mean()
    return float(t_iou * s_iou)


def video_map(tubes: Sequence[TubeDetection], gt_tubes: Sequence[TubeDetection], iou_threshold: float = 0.5) -> APResult:
    """Per-class video AP with tube-level matching; ``gt_tubes`` scores are ignored."""
    classes = sorted({g.label for g in gt_tubes})
    per_class = {}
    for c in classes:
        dets = [t for t in tubes if t.label == c]
        gt_by_key = defaultdict(list)
        for g in gt_tubes:
            if g.label == c:
                gt_by_key[g.video].append(g)
        sims = [
            np.array([tube_iou(d.start_frame, d.boxes, g.start_frame, g.boxes) for g in gt_by_key.get(d.video, [])])
            for d in dets
        ]
        counts = {key: len(v) for key, v in gt_by_key.items()}
        tp = greedy_match([d.video for d in dets], [d.score for d in dets], sims, counts, iou_threshold)
        per_class[c] = average_precision(tp, sum(counts.values()))
    return APResult(per_class)


def mean_fuse(a: Sequence[ScoredTubelet], b: Sequence[ScoredTubelet]) -> list[ScoredTubelet]:
    """Average index-aligned outputs of two detectors: distributions and boxes."""
    if len(a) != len(b):
        raise ValueError("detection sets have different sizes")
    fused = []
    for x, y in zip(a, b):
        tx, ty = x.tubelet, y.tubelet
        if tx.start_frame != ty.start_frame or len(tx) != len(ty) or len(x.probs) != len(y.probs):
            raise ValueError("detection sets are not aligned")
        probs = (np.asarray(x.probs) + np.asarray(y.probs)) / 2.0
        boxes = (tx.boxes + ty.boxes) / 2.0
        fused.append(ScoredTubelet(probs, Tubelet(tx.start_frame, boxes, tx.padding | ty.padding)))
    return fused


def tubelet_nms(tubelets: Sequence[Tubelet], scores: Sequence[float], clip_range, threshold: float) -> list[int]:
    """Indices kept by greedy NMS on mean IoU over ``clip_range``, in score order."""
    start, stop = clip_range
    if not len(tubelets):
        return []
    boxes = np.stack([t.boxes_on(start, stop) for t in tubelets])
    overlap = iou(boxes[:, None], boxes[None, :]).mean(axis=-1)
    keep: list[int] = []
    for i in _rank(scores):
        if not keep or overlap[i, keep].max() <= threshold:
            keep.append(int(i))
    return keep


def best_gt_overlaps(proposals: Sequence[Tubelet], tubes, clip_range) -> np.ndarray:
    """Each proposal's best overlap with any tube over ``clip_range`` (0 without tubes)."""
    out = np.zeros(len(proposals))
    for i, p in enumerate(proposals):
        if tubes:
            out[i] = max(overlap_with_tube(p, g, clip_range) for g in tubes)
    return out


def iou_histogram(step_overlaps: Sequence[np.ndarray], bin_width: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Counts of best-gt overlaps per step; returns ``(edges, counts[step, bin])``.

    The last bin is closed so an overlap of exactly 1 lands in it.
    """
    n_bins = int(round(1.0 / bin_width))
    if n_bins < 1 or abs(n_bins * bin_width - 1.0) > 1e-9:
        raise ValueError("bin width must divide 1")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    counts = np.zeros((len(step_overlaps), n_bins), dtype=int)
    for s, ov in enumerate(step_overlaps):
        idx = np.clip(np.floor(np.asarray(ov) / bin_width + 1e-9).astype(int), 0, n_bins - 1)
        counts[s] = np.bincount(idx, minlength=n_bins)
    return edges, counts


def windowed_miut(boxes, length: int) -> float:
    """Mean MIUT over consecutive non-overlapping windows of ``length`` frames.

    Only full windows count; a tube shorter than ``length`` has none.
    """
    arr = np.asarray(getattr(boxes, "boxes", boxes), dtype=np.float64).reshape(-1, 4)
    if length < 1:
        raise ValueError("window length must be positive")
    n = len(arr) // length
    if n == 0:
        raise ValueError(f"tube of {len(arr)} frames has no full window of {length}")
    return float(np.mean([miut(arr[i * length:(i + 1) * length]) for i in range(n)]))
