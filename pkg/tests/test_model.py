import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepdet.geometry import Tubelet, decode_boxes, iou
from stepdet.losses import CE_EPS, cross_entropy, loc_loss, smooth_l1, softmax
from stepdet.model import (
    Detection,
    LinearHead,
    SampleTargets,
    heads_from_dict,
    heads_to_dict,
    linear_forward,
    linear_loss_and_gradients,
    load_heads,
    oracle_refine,
    oracle_refine_batch,
    sample_loss,
    save_heads,
)
from stepdet.simulator import GroundTruthTube, SceneSpec, feature_width, generate_scene, linear_tube

from oracles import central_difference


def random_case(rng: np.random.Generator):
    """A random head, feature block and target set for gradient checks."""
    c = int(rng.integers(1, 5))
    n = int(rng.integers(3, 13))
    head = LinearHead.random(feature_width(c), c, rng, scale=0.3)
    x = rng.normal(0, 1, size=(n, feature_width(c)))
    valid = rng.random(n) > 0.2
    valid[int(rng.integers(n))] = True
    x[~valid] = 0.0
    k = int(rng.integers(1, n + 1)) if rng.random() < 0.7 else None
    label = int(rng.integers(0, c + 1))
    t = SampleTargets(label)
    if label:
        t.reg = rng.normal(0, 1.5, size=(n, 4))
        t.reg_mask = valid & (rng.random(n) > 0.1)
        if k:
            t.prev, t.next = rng.normal(0, 1.5, size=(k, 4)), rng.normal(0, 1.5, size=(k, 4))
            t.prev_mask, t.next_mask = rng.random(k) > 0.2, rng.random(k) > 0.2
    lam, gamma = float(rng.uniform(0.1, 2)), float(rng.uniform(0, 1))
    return head, x, t, lam, gamma, valid, k


def gradient_relative_error(head, x, t, lam, gamma, valid, k) -> float:
    """Worst relative error between analytic and central-difference gradients."""
    _, grads = linear_loss_and_gradients(head, x, t, lam, gamma, valid, k)
    params = {n: getattr(head, n) for n in head.param_names()}

    def total(_):
        return linear_loss_and_gradients(head, x, t, lam, gamma, valid, k)[0].total

    numeric = central_difference(total, params)
    worst = 0.0
    for name in head.param_names():
        a, n = getattr(grads, name), numeric[name]
        denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_central_differences(seed):
    assert gradient_relative_error(*random_case(np.random.default_rng(seed))) < 1e-4


def test_smooth_l1_values_and_loc_loss_mask():
    assert smooth_l1(np.array([0.5, -2.0, 1.0])).tolist() == [0.125, 1.5, 0.5]
    pred = np.zeros((3, 4))
    target = np.ones((3, 4)) * np.array([[0.5], [2.0], [9.0]])
    assert loc_loss(pred, target, np.array([True, True, False])) == pytest.approx((4 * 0.125 + 4 * 1.5) / 2)
    assert loc_loss(pred, target, np.zeros(3, bool)) == 0.0


def test_cross_entropy_is_clamped():
    loss, clamped = cross_entropy(np.array([1.0, 0.0]), 1)
    assert clamped and loss == pytest.approx(-np.log(CE_EPS))
    loss, clamped = cross_entropy(np.array([0.25, 0.75]), 1)
    assert not clamped and loss == pytest.approx(-np.log(0.75))


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_is_a_distribution(logits):
    p = softmax(np.array(logits))
    assert np.all(p >= 0) and p.sum() == pytest.approx(1.0)


def test_anticipation_is_main_regression_plus_residual():
    rng = np.random.default_rng(1)
    head = LinearHead.random(32, 4, rng)
    x = rng.normal(size=(18, 32))
    out = linear_forward(head, x, anticipation_k=6)
    assert np.array_equal(out.ant_prev, out.offsets[:6] + out.res_prev)
    assert np.array_equal(out.ant_next, out.offsets[-6:] + out.res_next)
    assert out.offsets.shape == (18, 4, 4) and out.probs.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        linear_forward(head, x[:4], anticipation_k=6)
    with pytest.raises(ValueError):
        linear_forward(head, x[:, :10])


def test_regression_layout_is_coordinate_major():
    head = LinearHead.zeros(32, 4)
    head.reg_b[2 * 4 + 1] = 7.0  # coordinate 2 (tw) of class 2
    out = linear_forward(head, np.zeros((3, 32)))
    assert np.all(out.offsets[:, 2, 1] == 7.0) and np.count_nonzero(out.offsets) == 3


def test_negative_samples_only_pay_classification():
    head = LinearHead.zeros(32, 4)
    out = linear_forward(head, np.ones((6, 32)))
    terms = sample_loss(out, SampleTargets(0), 1.0, 0.5)
    assert terms.loc == 0.0 and terms.ant == 0.0 and terms.cls == pytest.approx(np.log(5))


def _cuboid(box, start, k):
    return Tubelet(start, np.repeat(np.asarray(box, float)[None, :], k, axis=0))


def test_noise_free_oracle_decodes_ground_truth_exactly():
    gt = [linear_tube(3, [100, 120, 160, 220], (2.0, -1.0), 30)]
    prop = _cuboid([105, 110, 175, 215], 6, 6)
    det = oracle_refine(prop, gt, 4)
    assert det.best_class == 3 and int(np.argmax(det.probs)) == 3
    out = det.decode(3)
    assert np.max(np.abs(out.boxes - gt[0].boxes[6:12])) < 1e-9


def test_oracle_targets_the_best_overlap_tube():
    prop = _cuboid([0, 0, 100, 100], 0, 6)
    # overlaps 0.8 and 0.1 with the proposal
    a = GroundTruthTube(1, 0, [[0, 0, 100, 80]] * 6)
    b = GroundTruthTube(2, 0, [[0, 0, 10, 100]] * 6)
    det = oracle_refine(prop, [b, a], 2)
    assert np.allclose(det.decode(1).boxes, a.boxes)
    assert det.probs[1] > det.probs[2] > 0
    assert det.probs.sum() == pytest.approx(1.0)
    logits = np.log(det.probs) - np.log(det.probs[0])
    assert logits[1] == pytest.approx(10 * 0.8 - 10 * 0.2)


def test_oracle_without_ground_truth_is_background():
    det = oracle_refine(_cuboid([0, 0, 10, 10], 0, 6), [], 3, anticipation_k=6)
    assert det.probs[0] == 1.0 and np.all(det.offsets == 0) and det.ant_prev.shape == (6, 4, 3)


def test_noisy_oracle_is_seeded_and_bounded():
    gt = [linear_tube(1, [100, 100, 200, 200], (1.0, 0.0), 30)]
    prop = _cuboid([90, 90, 210, 220], 0, 6)
    a = oracle_refine(prop, gt, 2, noise=0.15, rng=np.random.default_rng(5))
    b = oracle_refine(prop, gt, 2, noise=0.15, rng=np.random.default_rng(5))
    clean = oracle_refine(prop, gt, 2)
    assert np.array_equal(a.offsets, b.offsets)
    dev = np.abs(a.offsets - clean.offsets)
    assert dev.max() <= 0.15 and dev.max() > 0
    with pytest.raises(ValueError):
        oracle_refine(prop, gt, 2, noise=0.1)


def test_oracle_anticipation_reaches_adjacent_clips():
    gt = [linear_tube(2, [100, 100, 150, 160], (3.0, 0.0), 30)]
    prop = _cuboid([95, 95, 160, 170], 12, 6)
    det = oracle_refine(prop, gt, 2, anticipation_k=6)
    before = decode_boxes(det.ant_prev[:, :, 1], prop.boxes[:6])
    after = decode_boxes(det.ant_next[:, :, 1], prop.boxes[-6:])
    assert np.allclose(before, gt[0].boxes[6:12]) and np.allclose(after, gt[0].boxes[18:24])


@pytest.mark.parametrize("seed", range(4))
def test_batched_oracle_matches_the_scalar_one(seed):
    scene = generate_scene(SceneSpec(seed=seed))
    rng = np.random.default_rng(seed)
    pad = np.zeros(18, bool)
    pad[:6] = seed % 2 == 0
    props = [
        Tubelet(0, np.tile([x, y, x + w, y + w], (18, 1)) + rng.normal(0, 3, (18, 4)), padding=pad)
        for x, y, w in rng.uniform([0, 0, 40], [250, 250, 150], size=(12, 3))
    ]
    kw = dict(sharpness=7.0, anticipation_k=6)
    batch = oracle_refine_batch(props, scene.tubes, 4, 0.15, np.random.default_rng(1), **kw)
    r = np.random.default_rng(1)
    for det, p in zip(batch, props):
        ref = oracle_refine(p, scene.tubes, 4, 0.15, r, **kw)
        for name in ("probs", "offsets", "ant_prev", "ant_next"):
            assert np.allclose(getattr(det, name), getattr(ref, name), rtol=0, atol=1e-12), name


def test_detection_shape_checks():
    with pytest.raises(ValueError):
        Detection(_cuboid([0, 0, 1, 1], 0, 3), np.ones(3) / 3, np.zeros((4, 4, 2)))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    heads = [LinearHead.random(32, 4, rng) for _ in range(3)]
    save_heads(tmp_path / "h.json", heads)
    back = load_heads(tmp_path / "h.json")
    for a, b in zip(heads, back):
        for n in a.param_names():
            assert np.array_equal(getattr(a, n), getattr(b, n))
    doc = heads_to_dict(heads)
    doc["heads"][0]["shapes"]["cls_w"] = [2, 2]
    with pytest.raises(ValueError):
        heads_from_dict(doc)
    with pytest.raises(ValueError):
        heads_from_dict({**heads_to_dict(heads), "version": 99})
    json.dumps(heads_to_dict(heads))
