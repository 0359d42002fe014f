import numpy as np
import pytest
from hypothesis import given, strategies as st

from stepdet.geometry import (
    Box,
    Tubelet,
    clamp_boxes,
    decode,
    decode_boxes,
    encode,
    encode_boxes,
    iou,
    miut,
    pairwise_iou,
    tubelet_overlap,
)

coord = st.floats(0, 500, allow_nan=False)
size = st.floats(1, 300, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return Box(x, y, x + draw(size), y + draw(size))


def test_iou_of_half_shifted_squares():
    a = Box(0, 0, 10, 10)
    b = Box(5, 0, 15, 10)
    assert iou(a.as_array(), b.as_array()) == pytest.approx(50 / 150)


def test_disjoint_and_degenerate_boxes_have_zero_iou():
    assert iou(np.array([0, 0, 1, 1.0]), np.array([2, 2, 3, 3.0])) == 0.0
    assert iou(np.zeros(4), np.zeros(4)) == 0.0


def test_pairwise_iou_matches_elementwise():
    a = np.array([[0, 0, 10, 10], [5, 5, 20, 20.0]])
    b = np.array([[0, 0, 10, 10], [0, 0, 5, 5], [100, 100, 110, 110.0]])
    m = pairwise_iou(a, b)
    for i in range(2):
        for j in range(3):
            assert m[i, j] == pytest.approx(float(iou(a[i], b[j])))


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    v = float(iou(a.as_array(), b.as_array()))
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(float(iou(b.as_array(), a.as_array())))


@given(boxes())
def test_iou_with_itself_is_one(a):
    assert float(iou(a.as_array(), a.as_array())) == pytest.approx(1.0)


def test_encode_known_values():
    anchor = Box(0, 0, 10, 20)
    target = Box(5, 0, 25, 20)
    tx, ty, tw, th = encode(target, anchor)
    assert tx == pytest.approx(1.0)
    assert ty == pytest.approx(0.0)
    assert tw == pytest.approx(np.log(2.0))
    assert th == pytest.approx(0.0)


def test_encode_rejects_zero_size():
    with pytest.raises(ValueError):
        encode(Box(0, 0, 5, 5), Box(1, 1, 1, 4))
    with pytest.raises(ValueError):
        encode(Box(2, 2, 2, 5), Box(0, 0, 5, 5))


@given(boxes(), boxes())
def test_decode_inverts_encode(target, anchor):
    got = decode(encode(target, anchor), anchor).as_array()
    assert np.max(np.abs(got - target.as_array())) < 1e-9


def test_decode_clamps_to_frame():
    out = decode_boxes(np.array([[5.0, 0, 0, 0]]), np.array([[0, 0, 10, 10.0]]), bounds=(40, 40))
    assert np.all(out[:, 0::2] <= 40)
    assert clamp_boxes(np.array([-5, -5, 50, 50.0]), (40, 30)).tolist() == [0, 0, 40, 30]


def test_tubelet_padding_and_overlap():
    a = Tubelet(0, np.array([[0, 0, 10, 10.0]] * 4))
    b = Tubelet(1, np.array([[0, 0, 10, 10.0], [0, 0, 10, 10.0], [5, 0, 15, 10.0]]))
    assert tubelet_overlap(a, b, (1, 3)) == pytest.approx(1.0)
    assert tubelet_overlap(a, b, (1, 4)) == pytest.approx((1 + 1 + 1 / 3) / 3)
    with pytest.raises(ValueError):
        tubelet_overlap(a, b, (0, 2))
    assert a.valid.all() and len(a) == 4 and a.end_frame == 4


def test_miut_conventions():
    still = np.array([[0, 0, 10, 10.0]] * 5)
    assert miut(still) == 1.0
    assert miut(still[:1]) == 1.0
    # center index is len // 2
    moving = np.array([[0, 0, 10, 10.0], [2, 0, 12, 10.0], [4, 0, 14, 10.0], [6, 0, 16, 10.0]])
    center = moving[2]
    expected = min(float(iou(b, center)) for b in moving)
    assert miut(moving) == pytest.approx(expected)
    assert miut(moving) == pytest.approx(60 / 140)
    with pytest.raises(ValueError):
        miut(np.zeros((0, 4)))
