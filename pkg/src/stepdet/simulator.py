"""Synthetic moving-actor scenes and the feature synthesizer for linear heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Tubelet, encode_boxes, iou

FAMILIES = ("stationary", "linear", "sinusoidal", "piecewise")

# overlap levels of the class-indicator block in synthesized features
OVERLAP_LEVELS = (0.3, 0.4, 0.5)


@dataclass
class GroundTruthTube:
    label: int
    start_frame: int
    boxes: np.ndarray
    motion: dict = field(default_factory=dict)

    def __post_init__(self):
        self.boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.start_frame = int(self.start_frame)
        self.label = int(self.label)

    def __len__(self):
        return len(self.boxes)

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.boxes)

    def as_tubelet(self) -> Tubelet:
        return Tubelet(self.start_frame, self.boxes)

    def lookup(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Boxes at ``frames`` (nearest annotated frame outside the tube) and a presence mask."""
        frames = np.asarray(frames)
        idx = np.minimum(np.maximum(frames - self.start_frame, 0), len(self.boxes) - 1)
        present = (frames >= self.start_frame) & (frames < self.end_frame)
        return self.boxes[idx], present


def frame_ious(tubelet: Tubelet, tube: GroundTruthTube, start: int, stop: int) -> np.ndarray:
    """Per-frame IoU on ``[start, stop)``; frames where the tube is absent score 0."""
    frames = np.arange(start, stop)
    gt, present = tube.lookup(frames)
    return np.where(present, iou(tubelet.boxes_on(start, stop), gt), 0.0)


def overlap_with_tube(tubelet: Tubelet, tube: GroundTruthTube, clip_range=None) -> float:
    """Mean per-frame IoU against a ground-truth tube.

    Without ``clip_range`` the mean runs over the tubelet's non-padding frames.
    """
    if clip_range is None:
        ious = frame_ious(tubelet, tube, tubelet.start_frame, tubelet.end_frame)
        valid = tubelet.valid
        return float(ious[valid].mean()) if valid.any() else 0.0
    return float(frame_ious(tubelet, tube, *clip_range).mean())


def tube_overlaps(tubelet: Tubelet, tubes, clip_range=None) -> np.ndarray:
    """:func:`overlap_with_tube` against every tube, computed in one batch."""
    if not len(tubes):
        return np.zeros(0)
    start, stop = (tubelet.start_frame, tubelet.end_frame) if clip_range is None else clip_range
    frames = np.arange(start, stop)
    looked = [g.lookup(frames) for g in tubes]
    gt = np.stack([b for b, _ in looked])
    present = np.stack([p for _, p in looked])
    ious = np.where(present, iou(tubelet.boxes_on(start, stop)[None], gt), 0.0)
    if clip_range is None:
        valid = tubelet.valid
        return ious[:, valid].mean(axis=1) if valid.any() else np.zeros(len(tubes))
    return ious.mean(axis=1)


def overlap_matrix(tubelets, tubes, clip_range=None) -> np.ndarray:
    out = np.zeros((len(tubelets), len(tubes)))
    for i, t in enumerate(tubelets):
        if len(tubes):
            out[i] = tube_overlaps(t, tubes, clip_range)
    return out


def best_tube(tubelet: Tubelet, tubes, clip_range=None, overlaps: np.ndarray | None = None) -> tuple[int, float]:
    """Index and overlap of the best-matching tube.

    Ties (typically all-zero overlaps) go to the tube whose box is nearest
    to the tubelet's mean center, then to the lower index.
    """
    if not len(tubes):
        return -1, 0.0
    ovs = tube_overlaps(tubelet, tubes, clip_range) if overlaps is None else overlaps
    top = ovs.max()
    cands = np.flatnonzero(ovs >= top - 1e-12)
    if len(cands) > 1:
        frames = tubelet.frames[tubelet.valid] if tubelet.valid.any() else tubelet.frames
        c = tubelet.boxes[frames - tubelet.start_frame]
        center = np.array([(c[:, 0] + c[:, 2]).mean(), (c[:, 1] + c[:, 3]).mean()]) / 2.0
        dists = []
        for j in cands:
            g, _ = tubes[j].lookup(frames)
            gc = np.array([(g[:, 0] + g[:, 2]).mean(), (g[:, 1] + g[:, 3]).mean()]) / 2.0
            dists.append(np.hypot(*(gc - center)))
        return int(cands[int(np.argmin(dists))]), float(top)
    return int(cands[0]), float(top)


def safe_anchors(boxes: np.ndarray, min_size: float = 1.0) -> np.ndarray:
    """Widen degenerate boxes about their centers so they can serve as encode anchors."""
    b = np.array(boxes, dtype=np.float64, copy=True)
    if min((b[..., 2] - b[..., 0]).min(initial=min_size), (b[..., 3] - b[..., 1]).min(initial=min_size)) >= min_size:
        return b
    for lo, hi in ((0, 2), (1, 3)):
        size = b[..., hi] - b[..., lo]
        small = size < min_size
        if np.any(small):
            mid = (b[..., hi] + b[..., lo]) / 2.0
            b[..., lo] = np.where(small, mid - min_size / 2.0, b[..., lo])
            b[..., hi] = np.where(small, mid + min_size / 2.0, b[..., hi])
    return b


def offsets_to_tube(anchors: np.ndarray, tube: GroundTruthTube, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regression targets taking ``anchors`` onto the tube's boxes at ``frames``."""
    gt, present = tube.lookup(frames)
    return encode_boxes(safe_anchors(gt), safe_anchors(anchors)), present


@dataclass
class SceneSpec:
    width: float = 400.0
    height: float = 400.0
    n_frames: int = 30
    n_actors: tuple[int, int] = (1, 3)
    families: tuple[str, ...] = FAMILIES
    size_range: tuple[float, float] = (80.0, 200.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    speed_range: tuple[float, float] = (0.0, 4.0)  # px / frame
    scale_change: tuple[float, float] = (-0.01, 0.01)  # relative size change / frame
    n_classes: int = 4
    min_action_fraction: float = 1.0  # 1.0: every action spans the whole video
    seed: int = 0

    def __post_init__(self):
        self.n_actors = tuple(int(v) for v in self.n_actors)
        self.families = tuple(self.families)
        self.size_range = tuple(float(v) for v in self.size_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        self.speed_range = tuple(float(v) for v in self.speed_range)
        self.scale_change = tuple(float(v) for v in self.scale_change)
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown trajectory families: {sorted(unknown)}")
        if self.n_frames < 1 or self.n_classes < 1:
            raise ValueError("n_frames and n_classes must be positive")
        if not 0.0 < self.min_action_fraction <= 1.0:
            raise ValueError("min_action_fraction must lie in (0, 1]")

    def with_seed(self, seed: int) -> "SceneSpec":
        d = asdict(self)
        d["seed"] = int(seed)
        return SceneSpec(**d)


@dataclass
class Scene:
    name: str
    width: float
    height: float
    n_frames: int
    n_classes: int
    tubes: list[GroundTruthTube]

    @property
    def bounds(self) -> tuple[float, float]:
        return (self.width, self.height)


def _trajectory(family: str, n: int, speed: float, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    t = np.arange(n, dtype=np.float64)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    v = speed * np.array([np.cos(angle), np.sin(angle)])
    if family == "stationary":
        return np.zeros((n, 2)), {"family": family}
    if family == "linear":
        return t[:, None] * v[None, :], {"family": family, "velocity": v.tolist()}
    if family == "sinusoidal":
        amp = rng.uniform(5.0, 20.0)
        period = rng.uniform(10.0, 30.0)
        normal = np.array([-np.sin(angle), np.cos(angle)])
        path = t[:, None] * v[None, :] + amp * np.sin(2 * np.pi * t / period)[:, None] * normal[None, :]
        return path, {"family": family, "velocity": v.tolist(), "amplitude": amp, "period": period}
    # piecewise-linear: one direction change at a random turn frame
    turn = int(rng.integers(1, max(n, 2)))
    angle2 = angle + rng.uniform(np.pi / 4, 3 * np.pi / 4) * rng.choice([-1.0, 1.0])
    v2 = speed * np.array([np.cos(angle2), np.sin(angle2)])
    path = np.where(
        (t < turn)[:, None],
        t[:, None] * v[None, :],
        turn * v[None, :] + (t - turn)[:, None] * v2[None, :],
    )
    return path, {"family": family, "velocity": v.tolist(), "velocity2": v2.tolist(), "turn": turn}


def _place(lo: np.ndarray, hi: np.ndarray, extent: float, rng) -> float:
    # offset keeping every box inside [0, extent] if the path allows it
    a, b = -lo.min(), extent - hi.max()
    if a <= b:
        return rng.uniform(a, b)
    return (a + b) / 2.0


def generate_scene(spec: SceneSpec, name: str | None = None) -> Scene:
    """Deterministically realize a scene from ``spec`` (its seed included)."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_frames
    n_actors = int(rng.integers(spec.n_actors[0], spec.n_actors[1] + 1))
    tubes = []
    for _ in range(n_actors):
        family = spec.families[int(rng.integers(len(spec.families)))]
        size = rng.uniform(*spec.size_range)
        aspect = rng.uniform(*spec.aspect_range)
        w0 = min(size * np.sqrt(aspect), 0.9 * spec.width)
        h0 = min(size / np.sqrt(aspect), 0.9 * spec.height)
        speed = 0.0 if family == "stationary" else rng.uniform(*spec.speed_range)
        path, motion = _trajectory(family, n, speed, rng)
        growth = rng.uniform(*spec.scale_change)
        scale = (1.0 + growth) ** np.arange(n)
        w, h = w0 * scale, h0 * scale
        ox = _place(path[:, 0] - w / 2, path[:, 0] + w / 2, spec.width, rng)
        oy = _place(path[:, 1] - h / 2, path[:, 1] + h / 2, spec.height, rng)
        cx, cy = path[:, 0] + ox, path[:, 1] + oy
        boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, spec.width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, spec.height)
        label = int(rng.integers(1, spec.n_classes + 1))
        start, stop = 0, n
        if spec.min_action_fraction < 1.0:
            length = int(rng.integers(max(1, int(np.ceil(spec.min_action_fraction * n))), n + 1))
            start = int(rng.integers(0, n - length + 1))
            stop = start + length
        motion.update(growth=growth, size=[w0, h0])
        tubes.append(GroundTruthTube(label, start, boxes[start:stop], motion))
    return Scene(name or f"scene{spec.seed:05d}", spec.width, spec.height, n, spec.n_classes, tubes)


def linear_tube(
    label: int,
    first_box,
    velocity: tuple[float, float],
    n_frames: int,
    start_frame: int = 0,
    bounds: tuple[float, float] | None = None,
) -> GroundTruthTube:
    """A constant-size tube whose box moves by ``velocity`` pixels per frame."""
    b = np.asarray(first_box, dtype=np.float64)
    shift = np.arange(n_frames, dtype=np.float64)[:, None] * np.asarray(velocity, dtype=np.float64)[None, :]
    boxes = b[None, :] + np.concatenate([shift, shift], axis=1)
    if bounds is not None:
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, bounds[0])
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, bounds[1])
    motion = {"family": "linear", "velocity": [float(v) for v in velocity]}
    return GroundTruthTube(label, start_frame, boxes, motion)


def synth_features(
    proposal: Tubelet,
    scene: Scene,
    clip_range: tuple[int, int],
    k: int,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-frame feature rows ``(len(proposal), 16 + 4 * C)`` for a proposal.

    Each row holds the normalized proposal box, the offsets onto the
    best-overlap tube at that frame and ``k`` frames earlier and later, and
    a class block (one-hot label times the overlap and overlap-level
    indicators).  Padding rows are zero.  ``noise`` adds a uniform
    perturbation of that half-width.
    """
    n = len(proposal)
    c = scene.n_classes
    x = np.zeros((n, 16 + 4 * c))
    b = proposal.boxes
    x[:, 0] = (b[:, 0] + b[:, 2]) / (2 * scene.width)
    x[:, 1] = (b[:, 1] + b[:, 3]) / (2 * scene.height)
    x[:, 2] = (b[:, 2] - b[:, 0]) / scene.width
    x[:, 3] = (b[:, 3] - b[:, 1]) / scene.height
    j, ov = best_tube(proposal, scene.tubes, clip_range)
    if j >= 0:
        tube = scene.tubes[j]
        frames = proposal.frames
        for col, shift in ((4, 0), (8, -k), (12, k)):
            x[:, col:col + 4], _ = offsets_to_tube(b, tube, frames + shift)
        levels = [ov] + [float(ov > lv) for lv in OVERLAP_LEVELS]
        for li, val in enumerate(levels):
            x[:, 16 + li * c + tube.label - 1] = val
    if noise > 0:
        if rng is None:
            raise ValueError("feature noise needs an rng")
        x += rng.uniform(-noise, noise, size=x.shape)
    x[proposal.padding] = 0.0
    return x


def feature_width(n_classes: int) -> int:
    return 16 + 4 * n_classes
