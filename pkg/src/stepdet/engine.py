"""The progressive Extend -> Refine -> Update loop for a single clip."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Tubelet, clamp_boxes, decode_boxes
from .model import Detection, RefinementModel
from .simulator import Scene

EXTENSION_MODES = ("extrapolate", "anticipate", "none")

_PURPOSES = {"oracle": 0, "features": 1, "sampling": 2}


@dataclass
class StepConfig:
    """Hyperparameters of progressive detection and joint training.

    ``extension`` holds one flag per step; the flag of step 1 must be off
    since the initial proposals are never extended.
    """

    s_max: int = 3
    k: int = 6
    extension: tuple[bool, ...] = (False, True, True)
    extension_mode: str = "extrapolate"
    tau: tuple[float, ...] = (0.3, 0.4, 0.5)
    lam: float = 1.0
    gamma: float = 0.5
    n_pos: int = 8
    n_neg: int = 8

    def __post_init__(self):
        self.extension = tuple(bool(v) for v in self.extension)
        self.tau = tuple(float(v) for v in self.tau)
        if self.s_max < 1:
            raise ValueError("s_max must be >= 1")
        if self.k < 1:
            raise ValueError("clip length k must be >= 1")
        if len(self.extension) != self.s_max or len(self.tau) != self.s_max:
            raise ValueError("extension flags and tau schedule need one entry per step")
        if self.extension[0]:
            raise ValueError("step 1 cannot extend the initial proposals")
        if self.extension_mode not in EXTENSION_MODES:
            raise ValueError(f"extension_mode must be one of {EXTENSION_MODES}")
        if self.extension_mode == "extrapolate" and any(self.extension) and self.k < 2:
            raise ValueError("extrapolation needs k >= 2")
        if any(b < a for a, b in zip(self.tau, self.tau[1:])):
            raise ValueError("tau schedule must be nondecreasing")
        if self.n_pos < 0 or self.n_neg < 0:
            raise ValueError("sample counts must be nonnegative")

    @classmethod
    def with_extensions(cls, s_max: int, steps: Sequence[int], **kw) -> "StepConfig":
        """Convenience constructor taking the 1-based steps that extend."""
        flags = tuple(s in set(steps) for s in range(1, s_max + 1))
        tau = kw.pop("tau", None)
        if tau is None:
            tau = tuple(np.round(np.linspace(0.3, 0.5, s_max), 6)) if s_max > 1 else (0.5,)
        return cls(s_max=s_max, extension=flags, tau=tau, **kw)

    def length_at(self, step: int) -> int:
        """Tubelet length fed to the refinement at ``step``."""
        return self.k * (1 + 2 * sum(self.extension[:step]))

    def emits_anticipation(self, step: int) -> bool:
        return self.extension_mode == "anticipate" and step < self.s_max and self.extension[step]


@dataclass
class ClipContext:
    """Clip ``clip`` of a video: its frame ranges, ground truth and RNG streams."""

    scene: Scene
    clip: int
    k: int
    seed: int = 0
    video_index: int = 0

    @property
    def tubes(self):
        return self.scene.tubes

    @property
    def bounds(self) -> tuple[float, float]:
        return self.scene.bounds

    @property
    def n_frames(self) -> int:
        return self.scene.n_frames

    @property
    def target_range(self) -> tuple[int, int]:
        return self.clip_range(0)

    def clip_range(self, offset: int) -> tuple[int, int]:
        start = (self.clip + offset) * self.k
        return start, start + self.k

    def rng(self, step: int, purpose: str) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed, self.video_index, self.clip, step, _PURPOSES[purpose]])
        return np.random.default_rng(ss)


def n_clips(n_frames: int, k: int) -> int:
    return n_frames // k


def update_proposals(detections: Sequence[Detection], bounds) -> list[Tubelet]:
    """Replace each proposal by its regression for the top-scoring action class."""
    return [det.decode(det.best_class, bounds) for det in detections]


def _fix_order(boxes: np.ndarray) -> np.ndarray:
    # extrapolated corners can cross when a box shrinks fast; collapse to the midpoint
    if not (boxes[:, 2:] < boxes[:, :2]).any():
        return boxes
    for lo, hi in ((0, 2), (1, 3)):
        bad = boxes[:, hi] < boxes[:, lo]
        mid = (boxes[:, hi] + boxes[:, lo]) / 2.0
        boxes[:, lo] = np.where(bad, mid, boxes[:, lo])
        boxes[:, hi] = np.where(bad, mid, boxes[:, hi])
    return boxes


def extrapolate(proposal: Tubelet, direction: str, k: int, bounds=None) -> Tubelet:
    """Linear extension of ``k`` frames past either end of a proposal.

    Forward uses the last box and the box ``k - 1`` frames before it::

        B[end + j] = B_last + j / (k - 1) * (B_last - B_{last - k + 1}),  j = 1..k

    Backward mirrors it from the first box and the box ``k - 1`` frames after.
    """
    if k < 2:
        raise ValueError("extrapolation needs k >= 2")
    if len(proposal) < k:
        raise ValueError(f"proposal of length {len(proposal)} is shorter than k={k}")
    steps = np.arange(1, k + 1, dtype=np.float64)[:, None] / (k - 1)
    b = proposal.boxes
    if direction == "forward":
        edge, ref = b[-1], b[-k]
        boxes = edge + steps * (edge - ref)
        start = proposal.end_frame
    elif direction == "backward":
        edge, ref = b[0], b[k - 1]
        boxes = (edge + steps * (edge - ref))[::-1]
        start = proposal.start_frame - k
    else:
        raise ValueError(f"unknown direction {direction!r}")
    boxes = _fix_order(boxes.copy())
    if bounds is not None:
        boxes = clamp_boxes(boxes, bounds)
    return Tubelet(start, boxes)


def _replicate(box: np.ndarray, start: int, k: int) -> Tubelet:
    return Tubelet(start, np.repeat(box[None, :], k, axis=0))


def _pad_outside(seg: Tubelet, edge_box: np.ndarray, n_frames: int) -> Tubelet:
    outside = (seg.frames < 0) | (seg.frames >= n_frames)
    if outside.any():
        seg.boxes[outside] = edge_box
        seg.padding = seg.padding | outside
    return seg


def temporal_extend(
    proposals: Sequence[Tubelet],
    mode: str,
    k: int,
    bounds,
    n_frames: int,
    previous: Sequence[Detection] | None = None,
) -> list[Tubelet]:
    """Grow every proposal by ``k`` frames on each side.

    ``extrapolate`` continues the boundary motion linearly, ``anticipate``
    decodes the previous step's anticipation offsets (``previous`` must hold
    the detections that produced ``proposals``), and ``none`` replicates the
    boundary boxes.  Frames beyond the video are filled with the boundary
    box and marked as padding.
    """
    if mode not in EXTENSION_MODES:
        raise ValueError(f"unknown extension mode {mode!r}")
    if mode == "anticipate" and previous is None:
        raise ValueError("anticipation needs the previous step's detections")
    out = []
    for i, p in enumerate(proposals):
        if mode == "extrapolate":
            before = extrapolate(p, "backward", k, bounds)
            after = extrapolate(p, "forward", k, bounds)
        elif mode == "anticipate":
            det = previous[i]
            if det.ant_prev is None or det.ant_next is None:
                raise ValueError("previous detections carry no anticipation offsets")
            c = det.best_class - 1
            before = Tubelet(p.start_frame - k, decode_boxes(det.ant_prev[:, :, c], det.proposal.boxes[:k], bounds))
            after = Tubelet(p.end_frame, decode_boxes(det.ant_next[:, :, c], det.proposal.boxes[-k:], bounds))
        else:
            before = _replicate(p.boxes[0], p.start_frame - k, k)
            after = _replicate(p.boxes[-1], p.end_frame, k)
        before = _pad_outside(before, p.boxes[0], n_frames)
        after = _pad_outside(after, p.boxes[-1], n_frames)
        out.append(Tubelet.concat([before, p, after]))
    return out


@dataclass
class StepRecord:
    step: int
    inputs: list[Tubelet]
    detections: list[Detection]
    outputs: list[Tubelet]


@dataclass
class ClipResult:
    ctx: ClipContext
    steps: list[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> StepRecord:
        return self.steps[-1]


def detect_clip(
    ctx: ClipContext,
    initial_proposals: Sequence[Tubelet],
    config: StepConfig,
    models: Sequence[RefinementModel],
) -> ClipResult:
    """Run the progressive loop on one clip and keep every step's inputs and outputs."""
    if not initial_proposals:
        raise ValueError("no initial proposals")
    if len(models) != config.s_max:
        raise ValueError(f"need one model per step ({config.s_max}), got {len(models)}")
    result = ClipResult(ctx)
    proposals = list(initial_proposals)
    previous = None
    for step in range(1, config.s_max + 1):
        if step > 1 and config.extension[step - 1]:
            proposals = temporal_extend(
                proposals, config.extension_mode, config.k, ctx.bounds, ctx.n_frames, previous
            )
        dets = models[step - 1].refine(proposals, ctx, step, config.emits_anticipation(step))
        updated = update_proposals(dets, ctx.bounds)
        result.steps.append(StepRecord(step, proposals, dets, updated))
        proposals, previous = updated, dets
    return result
