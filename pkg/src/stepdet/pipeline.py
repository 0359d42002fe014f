"""Whole-video detection runs and their evaluation on synthetic scenes."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import ClipContext, ClipResult, StepConfig, detect_clip, n_clips
from .geometry import Box
from .io import DetectionRecord
from .linking import ActionTube, ClipDetection, link_tubes, trim_tube
from .metrics import (
    APResult,
    FrameDetection,
    FrameGT,
    ScoredTubelet,
    TubeDetection,
    best_gt_overlaps,
    frame_map,
    tubelet_nms,
    video_map,
)
from .proposals import default_grid, ava_pyramid, generate_pyramid, replicate_to_cuboids
from .simulator import Scene, SceneSpec, generate_scene

PROPOSAL_LAYOUTS = ("grid11", "pyramid34")


def initial_boxes(layout: str, width: float, height: float) -> list[Box]:
    if layout == "grid11":
        return default_grid(width, height)
    if layout == "pyramid34":
        return generate_pyramid(ava_pyramid(width, height))
    raise ValueError(f"unknown proposal layout {layout!r}; expected one of {PROPOSAL_LAYOUTS}")


def make_scenes(spec: SceneSpec, n_scenes: int, seed: int) -> list[Scene]:
    """``n_scenes`` scenes whose seeds are derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    return [generate_scene(spec.with_seed(int(s)), name=f"video{v:04d}") for v, s in enumerate(seeds)]


def detect_video(scene: Scene, video_index: int, config: StepConfig, models, boxes: Sequence[Box], seed: int) -> list[ClipResult]:
    out = []
    for clip in range(n_clips(scene.n_frames, config.k)):
        ctx = ClipContext(scene, clip, config.k, seed=seed, video_index=video_index)
        out.append(detect_clip(ctx, replicate_to_cuboids(boxes, ctx.target_range), config, models))
    return out


def _detect_job(args):
    return detect_video(*args)


def detect_scenes(scenes: Sequence[Scene], config: StepConfig, models, boxes: Sequence[Box], seed: int, jobs: int = 1) -> list[list[ClipResult]]:
    """Clip results per video; ``jobs > 1`` spreads videos over worker processes."""
    args = [(scene, v, config, models, boxes, seed) for v, scene in enumerate(scenes)]
    if jobs > 1 and len(scenes) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_detect_job, args))
    return [detect_video(*a) for a in args]


@dataclass
class ClipOutputs:
    """Scored tubelets of one clip at one step, indexed by proposal."""

    clip: int
    frames: tuple[int, int]
    outputs: list[ScoredTubelet]


def step_outputs(result: ClipResult, step: int) -> list[ScoredTubelet]:
    rec = result.steps[step - 1]
    return [ScoredTubelet(d.probs, t) for d, t in zip(rec.detections, rec.outputs)]


def clip_outputs(results: Sequence[ClipResult], step: int) -> list[ClipOutputs]:
    return [ClipOutputs(r.ctx.clip, r.ctx.target_range, step_outputs(r, step)) for r in results]


def records_to_clip_outputs(records: Sequence[DetectionRecord], video: str, step: int, k: int) -> list[ClipOutputs]:
    """Regroup one video's stored detections of one step by clip."""
    by_clip: dict[int, list[DetectionRecord]] = {}
    for r in records:
        if r.video == video and r.step == step:
            by_clip.setdefault(r.clip, []).append(r)
    out = []
    for clip in sorted(by_clip):
        recs = sorted(by_clip[clip], key=lambda r: r.proposal_id)
        out.append(ClipOutputs(clip, (clip * k, (clip + 1) * k), [ScoredTubelet(r.probs, r.tubelet) for r in recs]))
    return out


def detection_records(scene: Scene, results: Sequence[ClipResult]) -> list[DetectionRecord]:
    out = []
    for res in results:
        for s in range(1, len(res.steps) + 1):
            for i, o in enumerate(step_outputs(res, s)):
                out.append(DetectionRecord(scene.name, res.ctx.clip, i, s, o.probs, o.tubelet))
    return out


def clip_detections(clip: ClipOutputs, nms_threshold: float | None) -> list[ClipDetection]:
    """Per-class detections of one clip, after per-class tubelet NMS on the clip's frames."""
    outs = clip.outputs
    if not outs:
        return []
    n_classes = len(outs[0].probs) - 1
    tubelets = [o.tubelet for o in outs]
    dets = []
    for c in range(1, n_classes + 1):
        scores = [float(o.probs[c]) for o in outs]
        keep = tubelet_nms(tubelets, scores, clip.frames, nms_threshold) if nms_threshold is not None else range(len(outs))
        for i in keep:
            dets.append(ClipDetection(clip.clip, i, c, scores[i], tubelets[i], clip.frames))
    return dets


def frame_detections(video: str, clips: Sequence[ClipOutputs], nms_threshold: float | None = 0.5) -> list[FrameDetection]:
    out = []
    for clip in clips:
        for d in clip_detections(clip, nms_threshold):
            boxes = d.tubelet.boxes_on(*d.frames)
            pad = d.tubelet.padding[d.frames[0] - d.tubelet.start_frame:d.frames[1] - d.tubelet.start_frame]
            for j, f in enumerate(range(*d.frames)):
                if not pad[j]:
                    out.append(FrameDetection(video, f, d.label, d.score, tuple(boxes[j])))
    return out


def frame_ground_truth(scene: Scene, n_frames: int | None = None) -> list[FrameGT]:
    """Ground-truth boxes on every evaluated frame (frames past the last full clip excluded)."""
    limit = scene.n_frames if n_frames is None else n_frames
    out = []
    for tube in scene.tubes:
        for j, box in enumerate(tube.boxes):
            f = tube.start_frame + j
            if f < limit:
                out.append(FrameGT(scene.name, f, tube.label, tuple(box)))
    return out


def evaluated_frames(scene: Scene, k: int) -> int:
    return n_clips(scene.n_frames, k) * k


def step_frame_map(scenes, all_results, step: int, iou_threshold=0.5, nms_threshold=0.5) -> APResult:
    dets, gts = [], []
    for scene, results in zip(scenes, all_results):
        dets += frame_detections(scene.name, clip_outputs(results, step), nms_threshold)
        gts += frame_ground_truth(scene, evaluated_frames(scene, results[0].ctx.k if results else 1))
    return frame_map(dets, gts, iou_threshold)


def step_input_overlaps(all_results, step: int) -> np.ndarray:
    """Best-gt overlap of every proposal fed to ``step``, on its target clip."""
    vals = []
    for results in all_results:
        for res in results:
            vals.append(best_gt_overlaps(res.steps[step - 1].inputs, res.ctx.tubes, res.ctx.target_range))
    return np.concatenate(vals) if vals else np.zeros(0)


def step_output_overlaps(all_results, step: int) -> np.ndarray:
    vals = []
    for results in all_results:
        for res in results:
            vals.append(best_gt_overlaps(res.steps[step - 1].outputs, res.ctx.tubes, res.ctx.target_range))
    return np.concatenate(vals) if vals else np.zeros(0)


def link_video(scene: Scene, clips: Sequence[ClipOutputs], link_threshold=0.3, beta=0.2, nms_threshold=0.5) -> list[ActionTube]:
    """Link one video's clip detections into trimmed per-class action tubes."""
    dets = []
    for clip in clips:
        dets += clip_detections(clip, nms_threshold)
    tubes = []
    for c in range(1, scene.n_classes + 1):
        tubes += [trim_tube(t, beta) for t in link_tubes(dets, c, link_threshold)]
    return tubes


def tube_detections(scene: Scene, tubes: Sequence[ActionTube]) -> list[TubeDetection]:
    out = []
    for t in tubes:
        start, boxes = t.boxes()
        out.append(TubeDetection(scene.name, t.label, t.score, start, boxes))
    return out


def gt_tube_detections(scene: Scene, n_frames: int | None = None) -> list[TubeDetection]:
    limit = scene.n_frames if n_frames is None else n_frames
    out = []
    for tube in scene.tubes:
        stop = min(tube.end_frame, limit)
        if stop > tube.start_frame:
            out.append(TubeDetection(scene.name, tube.label, 1.0, tube.start_frame, tube.boxes[: stop - tube.start_frame]))
    return out


def step_video_map(scenes, all_results, step: int, iou_threshold=0.5, **link_kw) -> APResult:
    dets, gts = [], []
    for scene, results in zip(scenes, all_results):
        dets += tube_detections(scene, link_video(scene, clip_outputs(results, step), **link_kw))
        gts += gt_tube_detections(scene, evaluated_frames(scene, results[0].ctx.k if results else 1))
    return video_map(dets, gts, iou_threshold)


@dataclass
class BenchmarkResult:
    mean_input_iou: list[float]
    frame_map: list[float]
    input_overlaps: list[np.ndarray]

    @property
    def medians(self) -> list[float]:
        return [float(np.median(v)) for v in self.input_overlaps]


def benchmark(scenes, config: StepConfig, models, boxes, seed: int, jobs: int = 1, nms_threshold=0.5) -> BenchmarkResult:
    """Per-step mean input IoU, input-overlap samples and frame-mAP."""
    results = detect_scenes(scenes, config, models, boxes, seed, jobs)
    steps = range(1, config.s_max + 1)
    overlaps = [step_input_overlaps(results, s) for s in steps]
    maps = [step_frame_map(scenes, results, s, nms_threshold=nms_threshold).mean for s in steps]
    return BenchmarkResult([float(o.mean()) for o in overlaps], maps, overlaps)
