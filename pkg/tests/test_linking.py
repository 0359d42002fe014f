import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepdet.geometry import Tubelet
from stepdet.linking import (
    ActionTube,
    ClipDetection,
    labeling_energy,
    link_overlap,
    link_tubes,
    temporal_trim,
    trim_labels,
)

from oracles import brute_force_energy, enumerate_greedy_links

dyadic = st.integers(0, 16).map(lambda v: v / 16)


def random_detections(rng: np.random.Generator, n: int, n_clips: int = 3, k: int = 4) -> list[ClipDetection]:
    """Up to ``n`` boxes jittered around a few anchors so that some pairs link and others do not."""
    anchors = np.array([[0, 0, 40, 40], [20, 0, 60, 40], [100, 100, 150, 150]], float)
    out = []
    counts = {}
    for _ in range(n):
        c = int(rng.integers(n_clips))
        idx = counts.get(c, 0)
        counts[c] = idx + 1
        box = anchors[rng.integers(len(anchors))] + rng.normal(0, 4, 4)
        box[2:] = np.maximum(box[2:], box[:2] + 1)
        score = float(rng.integers(1, 64)) / 64
        out.append(ClipDetection(c, idx, 1, score, Tubelet(c * k, np.tile(box, (k, 1))), (c * k, (c + 1) * k)))
    return out


def linked_chains(dets, threshold):
    return [[(m.clip, m.index) for m in t.members] for t in link_tubes(dets, 1, threshold)]


@pytest.mark.parametrize("seed", range(30))
def test_linking_matches_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    dets = random_detections(rng, int(rng.integers(1, 7)))
    ov = lambda a, b: link_overlap(a.tubelet, b.tubelet)
    assert linked_chains(dets, 0.3) == enumerate_greedy_links(dets, ov, 0.3)


def test_every_detection_lands_in_exactly_one_tube():
    dets = random_detections(np.random.default_rng(3), 12, n_clips=5)
    members = [m for chain in linked_chains(dets, 0.3) for m in chain]
    assert sorted(members) == sorted((d.clip, d.index) for d in dets)


def test_linking_ignores_other_classes_and_weak_overlaps():
    a = ClipDetection(0, 0, 1, 0.9, Tubelet(0, np.tile([0.0, 0, 10, 10], (2, 1))), (0, 2))
    far = ClipDetection(1, 0, 1, 0.8, Tubelet(2, np.tile([50.0, 50, 60, 60], (2, 1))), (2, 4))
    other = ClipDetection(1, 1, 2, 0.8, Tubelet(2, np.tile([0.0, 0, 10, 10], (2, 1))), (2, 4))
    tubes = link_tubes([a, far, other], 1, 0.3)
    assert [[m.clip for m in t.members] for t in tubes] == [[0], [1]]


def test_link_overlap_on_extended_tubelets_uses_shared_frames():
    a = Tubelet(0, np.tile([0.0, 0, 10, 10], (12, 1)))
    b = Tubelet(6, np.tile([0.0, 0, 10, 20], (12, 1)))
    assert link_overlap(a, b) == pytest.approx(0.5)
    pad = np.zeros(12, bool)
    pad[:6] = True
    assert link_overlap(a, Tubelet(6, b.boxes, padding=pad)) == pytest.approx(0.5)  # boundary fallback


@given(st.lists(dyadic, min_size=1, max_size=10), st.integers(0, 8).map(lambda v: v / 8))
def test_trimming_is_optimal(scores, beta):
    labels = trim_labels(scores, beta)
    assert labeling_energy(scores, labels, beta) == brute_force_energy(scores, beta)


def test_trim_keeps_the_strong_run():
    assert temporal_trim([0.1, 0.9, 0.8, 0.2, 0.95], 0.5) == (1, 5)
    assert temporal_trim([0.1, 0.9, 0.8, 0.1, 0.1, 0.95], 0.2) == (5, 6)
    assert temporal_trim([0.1, 0.2, 0.3], 0.2) == (2, 3)
    assert temporal_trim([], 0.2) == (0, 0)


def test_trimmed_tube_reports_kept_members():
    members = [
        ClipDetection(c, 0, 1, s, Tubelet(2 * c, np.tile([0.0, 0, 5, 5], (2, 1))), (2 * c, 2 * c + 2))
        for c, s in enumerate([0.1, 0.9, 0.7])
    ]
    tube = ActionTube(1, members, (1, 3))
    assert tube.score == pytest.approx(0.8)
    assert tube.frame_range == (2, 6)
    start, boxes = tube.boxes()
    assert start == 2 and boxes.shape == (4, 4)
