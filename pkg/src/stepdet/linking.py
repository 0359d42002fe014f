"""Clip-to-video tube linking and score-smoothness temporal trimming."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Tubelet, iou


@dataclass
class ClipDetection:
    """One class-scored tubelet of one clip.

    ``frames`` is the clip's own frame range; ``tubelet`` may extend past it
    when the proposal was temporally extended.
    """

    clip: int
    index: int
    label: int
    score: float
    tubelet: Tubelet
    frames: tuple[int, int]


@dataclass
class ActionTube:
    label: int
    members: list[ClipDetection] = field(default_factory=list)
    interval: tuple[int, int] | None = None  # trimmed member span [lo, hi)

    @property
    def kept(self) -> list[ClipDetection]:
        lo, hi = self.interval if self.interval is not None else (0, len(self.members))
        return self.members[lo:hi]

    @property
    def score(self) -> float:
        kept = self.kept
        return float(np.mean([m.score for m in kept])) if kept else 0.0

    @property
    def frame_range(self) -> tuple[int, int]:
        kept = self.kept
        return kept[0].frames[0], kept[-1].frames[1]

    def boxes(self) -> tuple[int, np.ndarray]:
        """Start frame and per-frame boxes over the kept members' clip frames."""
        parts = [m.tubelet.boxes_on(*m.frames) for m in self.kept]
        return self.kept[0].frames[0], np.concatenate(parts)


def link_overlap(a: Tubelet, b: Tubelet) -> float:
    """Mean IoU over shared non-padding frames; boundary-box IoU when nothing is shared."""
    lo, hi = max(a.start_frame, b.start_frame), min(a.end_frame, b.end_frame)
    if hi > lo:
        va = a.valid[lo - a.start_frame:hi - a.start_frame]
        vb = b.valid[lo - b.start_frame:hi - b.start_frame]
        both = va & vb
        if both.any():
            return float(iou(a.boxes_on(lo, hi)[both], b.boxes_on(lo, hi)[both]).mean())
    first, second = (a, b) if a.start_frame <= b.start_frame else (b, a)
    last_valid = first.boxes[first.valid][-1] if first.valid.any() else first.boxes[-1]
    first_valid = second.boxes[second.valid][0] if second.valid.any() else second.boxes[0]
    return float(iou(last_valid, first_valid))


def _better(a: ClipDetection, b: ClipDetection | None) -> bool:
    # higher score, then lower clip, then lower proposal index
    if b is None:
        return True
    return (-a.score, a.clip, a.index) < (-b.score, b.clip, b.index)


def link_tubes(detections: Sequence[ClipDetection], label: int, threshold: float = 0.5) -> list[ActionTube]:
    """Greedy linking of one class's clip detections within a video.

    Seeds are taken in order of decreasing score; a tube grows forward and
    then backward one clip at a time, taking the best-scoring unconsumed
    detection of the adjacent clip whose link overlap exceeds ``threshold``.
    """
    dets = [d for d in detections if d.label == label]
    by_clip: dict[int, list[ClipDetection]] = {}
    for d in dets:
        by_clip.setdefault(d.clip, []).append(d)
    used: set[tuple[int, int]] = set()
    order = sorted(dets, key=lambda d: (-d.score, d.clip, d.index))
    tubes = []

    def step(cur: ClipDetection, direction: int) -> ClipDetection | None:
        best = None
        for cand in by_clip.get(cur.clip + direction, []):
            if (cand.clip, cand.index) in used:
                continue
            if link_overlap(cur.tubelet, cand.tubelet) > threshold and _better(cand, best):
                best = cand
        return best

    for seed in order:
        if (seed.clip, seed.index) in used:
            continue
        used.add((seed.clip, seed.index))
        chain = [seed]
        while (nxt := step(chain[-1], +1)) is not None:
            used.add((nxt.clip, nxt.index))
            chain.append(nxt)
        while (prv := step(chain[0], -1)) is not None:
            used.add((prv.clip, prv.index))
            chain.insert(0, prv)
        tubes.append(ActionTube(label, chain))
    return tubes


def labeling_energy(scores: Sequence[float], labels: Sequence[int], beta: float) -> float:
    """Agreement of binary in/out labels with the scores minus ``beta`` per label switch."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    unary = float(np.sum(y * s + (1.0 - y) * (1.0 - s)))
    switches = int(np.sum(y[1:] != y[:-1]))
    return unary - beta * switches


def trim_labels(scores: Sequence[float], beta: float) -> np.ndarray:
    """Energy-maximizing in(1)/out(0) labeling by a two-state forward pass and backtrack."""
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n == 0:
        return np.zeros(0, dtype=int)
    unary = np.stack([1.0 - s, s], axis=1)  # column = label
    value = np.zeros((n, 2))
    back = np.zeros((n, 2), dtype=int)
    value[0] = unary[0]
    for t in range(1, n):
        for y in (0, 1):
            stay = value[t - 1, y]
            switch = value[t - 1, 1 - y] - beta
            # ties keep the label (fewer switches)
            back[t, y] = y if stay >= switch else 1 - y
            value[t, y] = max(stay, switch) + unary[t, y]
    labels = np.zeros(n, dtype=int)
    labels[-1] = 1 if value[-1, 1] >= value[-1, 0] else 0
    for t in range(n - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    return labels


def temporal_trim(scores: Sequence[float], beta: float) -> tuple[int, int]:
    """Member span ``[lo, hi)`` to keep.

    The span is the maximal run of in-labels around the highest-scoring
    in-labeled clip (earliest on ties).  When nothing is labeled in, only
    the highest-scoring clip is kept.
    """
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        return 0, 0
    labels = trim_labels(s, beta)
    if not labels.any():
        top = int(np.argmax(s))
        return top, top + 1
    top = int(np.argmax(np.where(labels == 1, s, -np.inf)))
    lo = top
    while lo > 0 and labels[lo - 1]:
        lo -= 1
    hi = top + 1
    while hi < len(s) and labels[hi]:
        hi += 1
    return lo, hi


def trim_tube(tube: ActionTube, beta: float) -> ActionTube:
    return ActionTube(tube.label, tube.members, temporal_trim([m.score for m in tube.members], beta))
