"""Refinement models: the per-step classification/regression heads.

A refinement model maps proposal tubelets of one clip to :class:`Detection`
objects: a distribution over ``C + 1`` classes (index 0 is background) and
class-specific offsets of shape ``(len, 4, C)``.  Two implementations exist:

* :class:`OracleModel` reads the ground truth and regresses onto it with a
  controllable amount of noise; a test double for a trained network.
* :class:`LinearModel` wraps a trainable :class:`LinearHead` fed with
  synthesized features.

Both can emit anticipation offsets for the ``K`` frames before and after the
proposal, expressed relative to the proposal's first and last ``K`` boxes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Protocol, Sequence

import numpy as np

from .geometry import Tubelet, decode_boxes, encode_boxes, iou
from .losses import cross_entropy, loc_loss, loc_loss_grad, softmax
from .simulator import (
    GroundTruthTube,
    best_tube,
    offsets_to_tube,
    safe_anchors,
    synth_features,
    tube_overlaps,
)

CHECKPOINT_FORMAT = "stepdet-heads"
CHECKPOINT_VERSION = 1


@dataclass
class Detection:
    proposal: Tubelet
    probs: np.ndarray  # (C + 1,)
    offsets: np.ndarray  # (len, 4, C)
    ant_prev: np.ndarray | None = None  # (K, 4, C), anchored on proposal[:K]
    ant_next: np.ndarray | None = None  # (K, 4, C), anchored on proposal[-K:]

    def __post_init__(self):
        if self.offsets.shape[:2] != (len(self.proposal), 4):
            raise ValueError(f"offsets shape {self.offsets.shape} does not match proposal length {len(self.proposal)}")
        if self.offsets.shape[2] != len(self.probs) - 1:
            raise ValueError("offsets need one slot per action class")

    @property
    def n_classes(self) -> int:
        return len(self.probs) - 1

    @property
    def best_class(self) -> int:
        """Highest-probability action class (background excluded, ties to the lowest index)."""
        return int(np.argmax(self.probs[1:])) + 1

    def decode(self, cls: int, bounds=None) -> Tubelet:
        boxes = decode_boxes(self.offsets[:, :, cls - 1], self.proposal.boxes, bounds)
        boxes[self.proposal.padding] = self.proposal.boxes[self.proposal.padding]
        return Tubelet(self.proposal.start_frame, boxes, self.proposal.padding.copy())


class RefinementModel(Protocol):
    """Step-specific refinement: one Refine call of the progressive loop."""

    def refine(self, proposals: Sequence[Tubelet], ctx, step: int, emit_anticipation: bool = False) -> list[Detection]:
        ...


# ---------------------------------------------------------------------------
# oracle


def oracle_refine(
    proposal: Tubelet,
    gt: Sequence[GroundTruthTube],
    n_classes: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    *,
    sharpness: float = 10.0,
    anticipation_k: int | None = None,
) -> Detection:
    """Ground-truth-driven detection for one proposal.

    Offsets target the best-overlap tube plus uniform noise on
    ``[-noise, noise]``, drawn independently per frame, coordinate and class.  Class logits are ``sharpness``
    times each class's best overlap; the background logit is ``sharpness``
    times one minus the overall best overlap.
    """
    n = len(proposal)
    k = anticipation_k
    if not gt:
        probs = np.zeros(n_classes + 1)
        probs[0] = 1.0
        zeros = np.zeros((n, 4, n_classes))
        ant = np.zeros((k, 4, n_classes)) if k else None
        return Detection(proposal, probs, zeros, ant, None if ant is None else ant.copy())

    ovs = tube_overlaps(proposal, gt)
    j, best = best_tube(proposal, gt, overlaps=ovs)
    per_class = np.zeros(n_classes)
    for g, ov in zip(gt, ovs):
        per_class[g.label - 1] = max(per_class[g.label - 1], ov)
    logits = sharpness * np.concatenate([[1.0 - ovs.max()], per_class])
    probs = softmax(logits)

    tube = gt[j]
    if noise > 0 and rng is None:
        raise ValueError("a noisy oracle needs an rng")

    def noisy(target: np.ndarray) -> np.ndarray:
        out = np.repeat(target[:, :, None], n_classes, axis=2)
        if noise > 0:
            out = out + rng.uniform(-noise, noise, size=out.shape)
        return out

    target, _ = offsets_to_tube(proposal.boxes, tube, proposal.frames)
    target[proposal.padding] = 0.0
    offsets = noisy(target)
    offsets[proposal.padding] = 0.0
    ant_prev = ant_next = None
    if k:
        prev, _ = offsets_to_tube(proposal.boxes[:k], tube, proposal.frames[:k] - k)
        nxt, _ = offsets_to_tube(proposal.boxes[-k:], tube, proposal.frames[-k:] + k)
        ant_prev, ant_next = noisy(prev), noisy(nxt)
    return Detection(proposal, probs, offsets, ant_prev, ant_next)


def oracle_refine_batch(
    proposals: Sequence[Tubelet],
    gt: Sequence[GroundTruthTube],
    n_classes: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
    *,
    sharpness: float = 10.0,
    anticipation_k: int | None = None,
) -> list[Detection]:
    """:func:`oracle_refine` over proposals sharing one frame range, vectorized.

    Noise is drawn proposal by proposal in the same order as the scalar
    version, so both give the same detections.
    """
    kw = dict(sharpness=sharpness, anticipation_k=anticipation_k)
    if not proposals:
        return []
    first = proposals[0]
    aligned = all(p.start_frame == first.start_frame and len(p) == len(first) for p in proposals)
    if not gt or not aligned:
        return [oracle_refine(p, gt, n_classes, noise, rng, **kw) for p in proposals]
    if noise > 0 and rng is None:
        raise ValueError("a noisy oracle needs an rng")

    k = anticipation_k
    frames = first.frames
    boxes = np.stack([p.boxes for p in proposals])
    valid = np.stack([p.valid for p in proposals])
    looked = [g.lookup(frames) for g in gt]
    gt_boxes = np.stack([b for b, _ in looked])
    present = np.stack([m for _, m in looked])
    ious = np.where(present[None], iou(boxes[:, None], gt_boxes[None]), 0.0)
    counts = valid.sum(axis=1)
    ovs = (ious * valid[:, None, :]).sum(axis=2) / np.maximum(counts, 1)[:, None]

    labels = np.array([g.label - 1 for g in gt])
    per_class = np.zeros((len(proposals), n_classes))
    for g, lab in enumerate(labels):
        per_class[:, lab] = np.maximum(per_class[:, lab], ovs[:, g])
    logits = sharpness * np.concatenate([1.0 - ovs.max(axis=1, keepdims=True), per_class], axis=1)
    js = np.array([best_tube(p, gt, overlaps=ovs[i])[0] for i, p in enumerate(proposals)])

    anchors = safe_anchors(boxes)
    targets = encode_boxes(safe_anchors(gt_boxes[js]), anchors)
    targets[~valid] = 0.0
    if k:
        shifted = []
        for shift, sl in ((-k, slice(None, k)), (k, slice(-k, None))):
            g = np.stack([t.lookup(frames[sl] + shift)[0] for t in gt])
            shifted.append(encode_boxes(safe_anchors(g[js]), anchors[:, sl]))

    def noisy(target):
        out = np.repeat(target[:, :, None], n_classes, axis=2)
        if noise > 0:
            out = out + rng.uniform(-noise, noise, size=out.shape)
        return out

    dets = []
    for i, p in enumerate(proposals):
        offsets = noisy(targets[i])
        offsets[p.padding] = 0.0
        ant_prev = ant_next = None
        if k:
            ant_prev, ant_next = noisy(shifted[0][i]), noisy(shifted[1][i])
        dets.append(Detection(p, softmax(logits[i]), offsets, ant_prev, ant_next))
    return dets


@dataclass
class OracleModel:
    n_classes: int
    noise: float = 0.0
    sharpness: float = 10.0

    def refine(self, proposals, ctx, step, emit_anticipation=False):
        rng = ctx.rng(step, "oracle")
        k = ctx.k if emit_anticipation else None
        return oracle_refine_batch(
            proposals, ctx.tubes, self.n_classes, self.noise, rng, sharpness=self.sharpness, anticipation_k=k
        )


# ---------------------------------------------------------------------------
# trainable linear head


@dataclass
class LinearHead:
    """Linear classification, regression and two residual anticipation regressors.

    Regression rows are laid out coordinate-major: output ``j * C + c`` is
    coordinate ``j`` of class ``c + 1``.
    """

    cls_w: np.ndarray  # (C + 1, D)
    cls_b: np.ndarray  # (C + 1,)
    reg_w: np.ndarray  # (4C, D)
    reg_b: np.ndarray  # (4C,)
    prev_w: np.ndarray  # (4C, D)
    prev_b: np.ndarray
    next_w: np.ndarray
    next_b: np.ndarray

    @classmethod
    def zeros(cls, width: int, n_classes: int) -> "LinearHead":
        c4 = 4 * n_classes
        return cls(
            np.zeros((n_classes + 1, width)), np.zeros(n_classes + 1),
            np.zeros((c4, width)), np.zeros(c4),
            np.zeros((c4, width)), np.zeros(c4),
            np.zeros((c4, width)), np.zeros(c4),
        )

    @classmethod
    def random(cls, width: int, n_classes: int, rng: np.random.Generator, scale: float = 0.1) -> "LinearHead":
        head = cls.zeros(width, n_classes)
        for name in head.param_names():
            arr = getattr(head, name)
            setattr(head, name, rng.normal(0.0, scale, size=arr.shape))
        return head

    @staticmethod
    def param_names() -> list[str]:
        return [f.name for f in fields(LinearHead)]

    @property
    def width(self) -> int:
        return self.cls_w.shape[1]

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[0] - 1

    def copy(self) -> "LinearHead":
        return LinearHead(*(getattr(self, n).copy() for n in self.param_names()))

    def zeros_like(self) -> "LinearHead":
        return LinearHead(*(np.zeros_like(getattr(self, n)) for n in self.param_names()))

    def add_(self, other: "LinearHead", scale: float = 1.0) -> "LinearHead":
        for n in self.param_names():
            getattr(self, n).__iadd__(scale * getattr(other, n))
        return self

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(getattr(self, n) ** 2) for n in self.param_names())))


@dataclass
class HeadOutput:
    probs: np.ndarray
    offsets: np.ndarray  # L^s, (len, 4, C)
    ant_prev: np.ndarray | None = None  # L^s_{-1} = L^s[:K] + f_{-1}(x)
    ant_next: np.ndarray | None = None  # L^s_{+1} = L^s[-K:] + f_{+1}(x)
    res_prev: np.ndarray | None = None  # f_{-1}(x)
    res_next: np.ndarray | None = None


def _global(x: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    if valid is None:
        return x.mean(axis=0)
    return x[valid].mean(axis=0) if valid.any() else np.zeros(x.shape[1])


def linear_forward(head: LinearHead, x: np.ndarray, valid: np.ndarray | None = None, anticipation_k: int | None = None) -> HeadOutput:
    """Run a head on per-frame features ``x`` of shape ``(len, D)``.

    Classification uses the mean feature over valid frames.  With
    ``anticipation_k`` the residual regressors produce offsets for the
    adjacent clips as the main regression plus the residual output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.width:
        raise ValueError(f"feature shape {x.shape} incompatible with head width {head.width}")
    c = head.n_classes
    n = len(x)
    probs = softmax(head.cls_w @ _global(x, valid) + head.cls_b)
    offsets = (x @ head.reg_w.T + head.reg_b).reshape(n, 4, c)
    out = HeadOutput(probs, offsets)
    if anticipation_k:
        k = anticipation_k
        if n < k:
            raise ValueError(f"anticipation needs at least {k} frames, got {n}")
        out.res_prev = (x[:k] @ head.prev_w.T + head.prev_b).reshape(k, 4, c)
        out.res_next = (x[-k:] @ head.next_w.T + head.next_b).reshape(k, 4, c)
        out.ant_prev = offsets[:k] + out.res_prev
        out.ant_next = offsets[-k:] + out.res_next
    return out


@dataclass
class SampleTargets:
    """Training targets for one sampled proposal; ``label == 0`` marks a negative."""

    label: int
    reg: np.ndarray | None = None  # (len, 4)
    reg_mask: np.ndarray | None = None
    prev: np.ndarray | None = None  # (K, 4)
    prev_mask: np.ndarray | None = None
    next: np.ndarray | None = None
    next_mask: np.ndarray | None = None


@dataclass
class LossTerms:
    cls: float = 0.0
    loc: float = 0.0
    ant: float = 0.0
    clamped: int = 0
    lam: float = 1.0
    gamma: float = 0.0

    @property
    def total(self) -> float:
        return self.cls + self.lam * self.loc + self.gamma * self.ant

    def __iadd__(self, other: "LossTerms"):
        self.cls += other.cls
        self.loc += other.loc
        self.ant += other.ant
        self.clamped += other.clamped
        return self


def sample_loss(out: HeadOutput, t: SampleTargets, lam: float, gamma: float) -> LossTerms:
    """Classification, localization and anticipation terms for one sample."""
    ce, clamped = cross_entropy(out.probs, t.label)
    terms = LossTerms(cls=ce, clamped=int(clamped), lam=lam, gamma=gamma)
    if t.label > 0 and t.reg is not None:
        u = t.label - 1
        terms.loc = loc_loss(out.offsets[:, :, u], t.reg, t.reg_mask)
        if out.ant_prev is not None and t.prev is not None:
            terms.ant = loc_loss(out.ant_prev[:, :, u], t.prev, t.prev_mask) + loc_loss(
                out.ant_next[:, :, u], t.next, t.next_mask
            )
    return terms


def linear_loss_and_gradients(
    head: LinearHead,
    x: np.ndarray,
    targets: SampleTargets,
    lam: float,
    gamma: float,
    valid: np.ndarray | None = None,
    anticipation_k: int | None = None,
) -> tuple[LossTerms, LinearHead]:
    out = linear_forward(head, x, valid, anticipation_k)
    terms = sample_loss(out, targets, lam, gamma)
    grads = head.zeros_like()
    c = head.n_classes
    n = len(x)

    dlogits = out.probs.copy()
    dlogits[targets.label] -= 1.0
    g = _global(x, valid)
    grads.cls_w = np.outer(dlogits, g)
    grads.cls_b = dlogits

    if targets.label > 0 and targets.reg is not None:
        u = targets.label - 1
        doff = np.zeros((n, 4, c))
        doff[:, :, u] = lam * loc_loss_grad(out.offsets[:, :, u], targets.reg, targets.reg_mask)
        if out.ant_prev is not None and targets.prev is not None and gamma != 0.0:
            k = anticipation_k
            dprev = np.zeros((k, 4, c))
            dnext = np.zeros((k, 4, c))
            dprev[:, :, u] = gamma * loc_loss_grad(out.ant_prev[:, :, u], targets.prev, targets.prev_mask)
            dnext[:, :, u] = gamma * loc_loss_grad(out.ant_next[:, :, u], targets.next, targets.next_mask)
            doff[:k] += dprev
            doff[n - k:] += dnext
            dp = dprev.reshape(k, 4 * c)
            dn = dnext.reshape(k, 4 * c)
            grads.prev_w = dp.T @ x[:k]
            grads.prev_b = dp.sum(axis=0)
            grads.next_w = dn.T @ x[n - k:]
            grads.next_b = dn.sum(axis=0)
        d = doff.reshape(n, 4 * c)
        grads.reg_w = d.T @ x
        grads.reg_b = d.sum(axis=0)
    return terms, grads


def linear_gradients(head, x, targets, lam, gamma, valid=None, anticipation_k=None) -> LinearHead:
    """Analytic gradient of one sample's loss with respect to every head parameter."""
    return linear_loss_and_gradients(head, x, targets, lam, gamma, valid, anticipation_k)[1]


@dataclass
class LinearModel:
    head: LinearHead
    feature_noise: float = 0.0

    def features(self, proposal: Tubelet, ctx, rng) -> np.ndarray:
        return synth_features(proposal, ctx.scene, ctx.target_range, ctx.k, self.feature_noise, rng)

    def refine(self, proposals, ctx, step, emit_anticipation=False):
        rng = ctx.rng(step, "features")
        k = ctx.k if emit_anticipation else None
        dets = []
        for p in proposals:
            out = linear_forward(self.head, self.features(p, ctx, rng), p.valid, k)
            dets.append(Detection(p, out.probs, out.offsets, out.ant_prev, out.ant_next))
        return dets


# ---------------------------------------------------------------------------
# checkpoints


def heads_to_dict(heads: Sequence[LinearHead]) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "heads": [
            {
                "shapes": {n: list(getattr(h, n).shape) for n in h.param_names()},
                "params": {n: getattr(h, n).ravel().tolist() for n in h.param_names()},
            }
            for h in heads
        ],
    }


def heads_from_dict(data: dict) -> list[LinearHead]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a head checkpoint")
    if data.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('version')}")
    heads = []
    for entry in data["heads"]:
        arrays = {}
        for n in LinearHead.param_names():
            shape = tuple(entry["shapes"][n])
            arr = np.asarray(entry["params"][n], dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise ValueError(f"parameter {n} does not match its shape header {shape}")
            arrays[n] = arr.reshape(shape)
        heads.append(LinearHead(**arrays))
    return heads


def save_heads(path, heads: Sequence[LinearHead]) -> None:
    from .io import atomic_write_text

    atomic_write_text(path, json.dumps(heads_to_dict(heads)))


def load_heads(path) -> list[LinearHead]:
    with open(path) as fh:
        return heads_from_dict(json.load(fh))
