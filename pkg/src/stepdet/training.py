"""Hard-aware sampling, the multi-task loss and joint multi-step training of linear heads."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import ClipContext, StepConfig, n_clips, temporal_extend, update_proposals
from .geometry import Box, Tubelet
from .losses import loc_loss, smooth_l1
from .model import (
    Detection,
    HeadOutput,
    LinearHead,
    LossTerms,
    SampleTargets,
    linear_forward,
    linear_loss_and_gradients,
    sample_loss,
)
from .proposals import replicate_to_cuboids
from .simulator import GroundTruthTube, Scene, feature_width, offsets_to_tube, overlap_matrix, synth_features

__all__ = [
    "Positive", "SampleSet", "TrainReport", "assign_and_sample", "joint_loss", "joint_train_pass",
    "loc_loss", "multi_task_loss", "smooth_l1", "train", "weighted_sample",
]


@dataclass
class Positive:
    index: int
    tube: int
    label: int
    targets: SampleTargets


@dataclass
class SampleSet:
    positives: list[Positive] = field(default_factory=list)
    negatives: list[int] = field(default_factory=list)
    forced: dict[int, int] = field(default_factory=dict)  # tube index -> proposal index

    def items(self) -> list[tuple[int, SampleTargets]]:
        out = [(p.index, p.targets) for p in self.positives]
        out += [(i, SampleTargets(0)) for i in self.negatives]
        return out

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def weighted_sample(candidates: Sequence[int], weights: Sequence[float], n: int, rng: np.random.Generator) -> list[int]:
    """Draw ``n`` items without replacement, each draw proportional to the remaining weights.

    When every remaining weight is zero the draw is uniform.
    """
    cands = list(candidates)
    w = [max(float(v), 0.0) for v in weights]
    picked = []
    while cands and len(picked) < n:
        total = sum(w)
        p = np.full(len(cands), 1.0 / len(cands)) if total <= 0 else np.asarray(w) / total
        j = int(rng.choice(len(cands), p=p))
        picked.append(cands.pop(j))
        w.pop(j)
    return picked


def positive_targets(proposal: Tubelet, tube: GroundTruthTube, k: int | None = None) -> SampleTargets:
    """Regression (and optional anticipation) targets taking a proposal onto a tube."""
    reg, present = offsets_to_tube(proposal.boxes, tube, proposal.frames)
    t = SampleTargets(tube.label, reg, present & proposal.valid)
    if k:
        t.prev, prev_present = offsets_to_tube(proposal.boxes[:k], tube, proposal.frames[:k] - k)
        t.next, next_present = offsets_to_tube(proposal.boxes[-k:], tube, proposal.frames[-k:] + k)
        t.prev_mask = prev_present
        t.next_mask = next_present
    return t


def assign_and_sample(
    proposals: Sequence[Tubelet],
    tubes: Sequence[GroundTruthTube],
    clip_range: tuple[int, int],
    tau: float,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
    scores: Sequence[float] | None = None,
    anticipation_k: int | None = None,
    overlaps: np.ndarray | None = None,
) -> SampleSet:
    """Pick positives and negatives for one clip and one step.

    Every tube first claims its highest-overlap proposal (tubes with the
    strongest match choose first; a proposal is claimed at most once).
    Other proposals above ``tau`` form the positive pool and the rest the
    negative pool; both are sampled with probability proportional to
    ``scores``, which default to each proposal's best overlap.  Claimed
    proposals always count among the positives.
    """
    m = len(proposals)
    ov = overlaps if overlaps is not None else overlap_matrix(proposals, tubes, clip_range)
    ov = np.asarray(ov, dtype=np.float64).reshape(m, len(tubes))
    best = ov.max(axis=1) if len(tubes) else np.zeros(m)
    weights = best if scores is None else np.asarray(scores, dtype=np.float64)

    forced: dict[int, int] = {}
    taken = np.zeros(m, dtype=bool)
    if len(tubes):
        for g in sorted(range(len(tubes)), key=lambda g: (-ov[:, g].max(), g)):
            col = np.where(taken, -np.inf, ov[:, g])
            if np.all(np.isinf(col)):
                break
            i = int(np.argmax(col))
            forced[g] = i
            taken[i] = True

    pos_pool = [i for i in range(m) if not taken[i] and best[i] > tau]
    neg_pool = [i for i in range(m) if not taken[i] and not best[i] > tau]

    claimed = sorted(forced.items(), key=lambda kv: (-ov[kv[1], kv[0]], kv[0]))[:n_pos]
    pos = [(i, g) for g, i in claimed]
    extra = weighted_sample(pos_pool, weights[pos_pool], n_pos - len(pos), rng)
    pos += [(i, int(np.argmax(ov[i]))) for i in extra]
    neg = weighted_sample(neg_pool, weights[neg_pool], n_neg, rng)

    positives = [
        Positive(i, g, tubes[g].label, positive_targets(proposals[i], tubes[g], anticipation_k)) for i, g in pos
    ]
    return SampleSet(positives, neg, {g: i for g, i in claimed})


def multi_task_loss(
    outputs: Sequence[HeadOutput], samples: SampleSet, lam: float, gamma: float
) -> LossTerms:
    """Summed classification loss over all samples plus weighted localization/anticipation over positives."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    total = LossTerms(lam=lam, gamma=gamma)
    for i, t in samples.items():
        total += sample_loss(outputs[i], t, lam, gamma)
    return total


@dataclass
class TrainReport:
    steps: list[LossTerms]

    @property
    def total(self) -> float:
        return float(sum(t.total for t in self.steps))


def joint_loss(
    batch: Sequence[ClipContext],
    config: StepConfig,
    heads: Sequence[LinearHead],
    initial_boxes: Sequence[Box],
    feature_noise: float = 0.0,
) -> tuple[TrainReport, list[LinearHead]]:
    """Batch-averaged per-step losses and their gradients, without updating the heads.

    Each clip runs the progressive loop with the current heads so that every
    step sees the proposals it would see at inference time.
    """
    if not batch:
        raise ValueError("empty batch")
    if len(heads) != config.s_max:
        raise ValueError("need one head per step")
    grads = [h.zeros_like() for h in heads]
    terms = [LossTerms(lam=config.lam, gamma=config.gamma) for _ in heads]
    for ctx in batch:
        proposals = replicate_to_cuboids(initial_boxes, ctx.target_range)
        previous: list[Detection] | None = None
        scores = None
        for step in range(1, config.s_max + 1):
            if step > 1 and config.extension[step - 1]:
                proposals = temporal_extend(
                    proposals, config.extension_mode, config.k, ctx.bounds, ctx.n_frames, previous
                )
            head = heads[step - 1]
            k = ctx.k if config.emits_anticipation(step) else None
            frng = ctx.rng(step, "features")
            feats = [synth_features(p, ctx.scene, ctx.target_range, ctx.k, feature_noise, frng) for p in proposals]
            dets = []
            for p, x in zip(proposals, feats):
                out = linear_forward(head, x, p.valid, k)
                dets.append(Detection(p, out.probs, out.offsets, out.ant_prev, out.ant_next))
            samples = assign_and_sample(
                proposals, ctx.tubes, ctx.target_range, config.tau[step - 1],
                config.n_pos, config.n_neg, ctx.rng(step, "sampling"), scores, k,
            )
            for i, t in samples.items():
                lt, g = linear_loss_and_gradients(
                    head, feats[i], t, config.lam, config.gamma, proposals[i].valid, k
                )
                terms[step - 1] += lt
                grads[step - 1].add_(g)
            scores = [float(d.probs[1:].max()) for d in dets]
            proposals = update_proposals(dets, ctx.bounds)
            previous = dets
    scale = 1.0 / len(batch)
    for t in terms:
        t.cls *= scale
        t.loc *= scale
        t.ant *= scale
    for g in grads:
        for name in g.param_names():
            getattr(g, name).__imul__(scale)
    return TrainReport(terms), grads


def joint_train_pass(
    batch: Sequence[ClipContext],
    config: StepConfig,
    heads: list[LinearHead],
    initial_boxes: Sequence[Box],
    lr: float,
    feature_noise: float = 0.0,
) -> TrainReport:
    """One joint update of every step's head from a batch of clips.

    The losses of all steps are summed and averaged over the batch, and one
    gradient-descent step of size ``lr`` is applied to all heads together.
    The returned report holds the losses before the update.
    """
    report, grads = joint_loss(batch, config, heads, initial_boxes, feature_noise)
    for h, g in zip(heads, grads):
        h.add_(g, -lr)
    return report


def clip_contexts(scenes: Sequence[Scene], k: int, seed: int) -> list[ClipContext]:
    return [
        ClipContext(scene, c, k, seed=seed, video_index=v)
        for v, scene in enumerate(scenes)
        for c in range(n_clips(scene.n_frames, k))
    ]


def train(
    scenes: Sequence[Scene],
    config: StepConfig,
    initial_boxes: Sequence[Box],
    iterations: int,
    lr: float,
    batch_size: int = 4,
    seed: int = 0,
    feature_noise: float = 0.0,
    heads: list[LinearHead] | None = None,
    log=None,
) -> tuple[list[LinearHead], list[TrainReport]]:
    """Repeated joint passes over random clip batches; heads start at zero unless given.

    ``log`` may be an open text file receiving CSV rows per iteration.
    """
    n_classes = scenes[0].n_classes
    if heads is None:
        heads = [LinearHead.zeros(feature_width(n_classes), n_classes) for _ in range(config.s_max)]
    pool = clip_contexts(scenes, config.k, seed)
    if not pool:
        raise ValueError("scenes are shorter than one clip")
    rng = np.random.default_rng(seed)
    writer = None
    if log is not None:
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(log_header(config.s_max))
    history = []
    for it in range(iterations):
        idx = rng.choice(len(pool), size=min(batch_size, len(pool)), replace=False)
        report = joint_train_pass([pool[i] for i in sorted(idx)], config, heads, initial_boxes, lr, feature_noise)
        history.append(report)
        if writer is not None:
            writer.writerow(log_row(it, report))
    return heads, history


def log_header(s_max: int) -> list[str]:
    cols = ["iteration"]
    for s in range(1, s_max + 1):
        cols += [f"cls_{s}", f"loc_{s}", f"ant_{s}"]
    return cols + ["total"]


def log_row(iteration: int, report: TrainReport) -> list[str]:
    row = [str(iteration)]
    for t in report.steps:
        row += [f"{t.cls:.8g}", f"{t.loc:.8g}", f"{t.ant:.8g}"]
    return row + [f"{report.total:.8g}"]


def report_csv(history: Sequence[TrainReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(log_header(len(history[0].steps)))
    for i, r in enumerate(history):
        w.writerow(log_row(i, r))
    return buf.getvalue()
