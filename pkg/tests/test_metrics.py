import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepdet.geometry import Tubelet
from stepdet.metrics import (
    FrameDetection,
    FrameGT,
    ScoredTubelet,
    TubeDetection,
    average_precision,
    frame_map,
    greedy_match,
    iou_histogram,
    mean_fuse,
    tube_iou,
    tubelet_nms,
    video_map,
    windowed_miut,
)

from oracles import brute_force_ap, brute_force_match


def test_ap_examples():
    assert average_precision([True], 1) == 1.0
    assert average_precision([False, True], 1) == 0.5
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert average_precision([], 3) == 0.0
    with pytest.raises(ValueError):
        average_precision([True], 0)


@given(st.lists(st.booleans(), max_size=20), st.integers(0, 5))
def test_ap_matches_brute_force(tp, missed):
    n_gt = sum(tp) + missed
    if n_gt == 0:
        return
    assert average_precision(tp, n_gt) == pytest.approx(brute_force_ap(tp, n_gt), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_greedy_match_agrees_with_brute_force(seed):
    rng = np.random.default_rng(seed)
    n_det, n_gt = int(rng.integers(1, 12)), int(rng.integers(0, 8))
    gts = [int(rng.integers(3)) for _ in range(n_gt)]
    dets = [(int(rng.integers(3)), float(rng.integers(0, 5))) for _ in range(n_det)]
    table = rng.integers(0, 5, size=(n_det, n_gt)) / 4
    sims = [np.array([table[i, j] for j in range(n_gt) if gts[j] == key]) for i, (key, _) in enumerate(dets)]
    counts = {key: gts.count(key) for key in set(gts)}
    # greedy_match reports in rank order; brute_force_match does the same
    got = greedy_match([d[0] for d in dets], [d[1] for d in dets], sims, counts, 0.5)
    want = brute_force_match(dets, gts, lambda i, j: table[i, j], 0.5)
    assert got == want


def test_frame_map_rewards_correct_boxes_only_once():
    gts = [FrameGT("v", 0, 1, (0, 0, 10, 10)), FrameGT("v", 1, 1, (0, 0, 10, 10))]
    dets = [
        FrameDetection("v", 0, 1, 0.9, (0, 0, 10, 10)),
        FrameDetection("v", 0, 1, 0.8, (0, 0, 10, 10)),  # duplicate
        FrameDetection("v", 1, 1, 0.7, (0, 0, 10, 10)),
        FrameDetection("v", 1, 2, 0.95, (0, 0, 10, 10)),  # class without gt
    ]
    res = frame_map(dets, gts)
    assert list(res.per_class) == [1]
    assert res.mean == pytest.approx(0.5 + 0.5 * 2 / 3)
    assert frame_map(dets[:1] + dets[2:3], gts).mean == 1.0


def test_tube_iou_multiplies_temporal_and_spatial_overlap():
    box = np.tile([0.0, 0, 10, 10], (10, 1))
    assert tube_iou(0, box, 0, box[:5]) == pytest.approx(0.5)
    assert tube_iou(0, box, 0, np.tile([0.0, 0, 10, 20], (10, 1))) == pytest.approx(0.5)
    assert tube_iou(0, box, 5, box) == pytest.approx(1 / 3)
    assert tube_iou(0, box[:3], 3, box) == 0.0


def test_video_map_is_monotone_in_the_threshold():
    rng = np.random.default_rng(0)
    gts, dets = [], []
    for v in range(5):
        box = np.tile([50.0, 50, 150, 150], (20, 1))
        gts.append(TubeDetection(f"v{v}", 1, 1.0, 0, box))
        for j in range(3):
            s = int(rng.integers(0, 10))
            jitter = rng.normal(0, 15, size=(20 - s, 4))
            dets.append(TubeDetection(f"v{v}", 1, float(rng.random()), s, box[s:] + jitter))
    maps = [video_map(dets, gts, t).mean for t in (0.05, 0.1, 0.2, 0.5, 0.75)]
    assert all(a >= b for a, b in zip(maps, maps[1:])) and maps[0] > maps[-1]


def _scored(p, box, start=0):
    return ScoredTubelet(np.array(p, float), Tubelet(start, np.tile(np.asarray(box, float), (2, 1))))


def test_mean_fusion_averages_scores_and_boxes():
    fused = mean_fuse([_scored([0.8, 0.2], [0, 0, 10, 10])], [_scored([0.4, 0.6], [10, 10, 20, 20])])
    assert np.allclose(fused[0].probs, [0.6, 0.4])
    assert np.allclose(fused[0].tubelet.boxes, [[5, 5, 15, 15]] * 2)
    with pytest.raises(ValueError):
        mean_fuse([_scored([1, 0], [0, 0, 1, 1])], [])
    with pytest.raises(ValueError):
        mean_fuse([_scored([1, 0], [0, 0, 1, 1])], [_scored([1, 0], [0, 0, 1, 1], start=3)])


def test_nms_suppresses_overlapping_lower_scores():
    t = [Tubelet(0, np.tile(np.asarray(b, float), (3, 1))) for b in
         ([0, 0, 10, 10], [0, 0, 10, 11], [50, 50, 60, 60], [0, 0, 10, 20])]
    keep = tubelet_nms(t, [0.5, 0.9, 0.3, 0.8], (0, 3), 0.5)
    # iou([0,0,10,11], [0,0,10,20]) = 0.55 > 0.5; iou(first, fourth) = 0.5 is kept
    assert keep == [1, 2]
    assert tubelet_nms(t, [0.5, 0.9, 0.3, 0.8], (0, 3), 1.0) == [1, 3, 0, 2]
    assert tubelet_nms([], [], (0, 3), 0.5) == []


def test_histogram_counts_every_overlap_and_closes_the_last_bin():
    edges, counts = iou_histogram([np.array([0.0, 0.05, 0.1, 0.95, 1.0]), np.array([0.3])], 0.1)
    assert len(edges) == 11 and counts.shape == (2, 10)
    assert counts[0].tolist() == [2, 1, 0, 0, 0, 0, 0, 0, 0, 2]
    assert counts.sum(axis=1).tolist() == [5, 1]
    with pytest.raises(ValueError):
        iou_histogram([np.zeros(1)], 0.3)


def test_windowed_miut_uses_full_windows_only():
    still = np.tile([0.0, 0, 10, 10], (13, 1))
    assert windowed_miut(still, 6) == 1.0
    moving = np.array([[x, 0, x + 10, 10] for x in range(12)], float)
    assert windowed_miut(moving, 6) > windowed_miut(moving, 12)
    with pytest.raises(ValueError):
        windowed_miut(still, 20)
