import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossmine.geometry import BoundingBox, DegenerateBoxError, clip, iou, iou_many


def box(x0, y0, x1, y1):
    return BoundingBox(x0, y0, x1, y1)


def test_iou_identical_boxes():
    assert iou(box(0, 0, 10, 10), box(0, 0, 10, 10)) == 1.0


def test_iou_disjoint_boxes():
    assert iou(box(0, 0, 10, 10), box(20, 20, 30, 30)) == 0.0


def test_iou_known_value():
    # Intersection 50, union 150 -> exactly 1/3.
    assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=0)
    assert iou(box(0, 0, 10, 10), box(5, 0, 15, 10)) == 50 / 150


def test_iou_touching_edges_is_zero():
    assert iou(box(0, 0, 10, 10), box(10, 0, 20, 10)) == 0.0


boxes = st.builds(
    lambda x0, y0, w, h: BoundingBox(x0, y0, x0 + w, y0 + h),
    st.integers(0, 50),
    st.integers(0, 50),
    st.integers(1, 40),
    st.integers(1, 40),
)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    ab = iou(a, b)
    assert ab == iou(b, a)
    assert 0.0 <= ab <= 1.0


@given(boxes)
def test_iou_self_is_exactly_one(a):
    assert iou(a, a) == 1.0


def test_iou_exact_integer_arithmetic():
    # Large coordinates still give exact ratios: one division at the end.
    a = box(0, 0, 30000, 30000)
    b = box(15000, 0, 45000, 30000)
    inter = 15000 * 30000
    union = 2 * 30000 * 30000 - inter
    assert iou(a, b) == inter / union


def test_iou_many_matches_scalar():
    rng = np.random.default_rng(3)
    fixed = box(10, 10, 30, 25)
    others = []
    for _ in range(50):
        x0, y0 = rng.integers(0, 40, 2)
        others.append((x0, y0, x0 + rng.integers(1, 20), y0 + rng.integers(1, 20)))
    expected = [iou(fixed, BoundingBox(*o)) for o in others]
    np.testing.assert_allclose(iou_many(fixed, np.array(others)), expected, atol=0)


def test_box_invariants_rejected():
    with pytest.raises(ValueError):
        BoundingBox(5, 0, 5, 10)  # zero width
    with pytest.raises(ValueError):
        BoundingBox(0, 8, 10, 3)  # inverted
    with pytest.raises(ValueError):
        BoundingBox(-1, 0, 10, 10)


def test_box_coerces_numpy_ints():
    b = BoundingBox(np.int64(1), np.int64(2), np.int64(5), np.int64(9))
    assert b.as_tuple() == (1, 2, 5, 9)
    assert all(isinstance(v, int) for v in b.as_tuple())


def test_clip_noop_when_inside():
    assert clip(box(0, 0, 10, 10), 64, 64) == box(0, 0, 10, 10)


def test_clip_corner():
    assert clip(box(60, 60, 70, 70), 64, 64) == box(60, 60, 64, 64)


def test_clip_fully_outside_is_degenerate():
    with pytest.raises(DegenerateBoxError):
        clip(box(70, 70, 80, 80), 64, 64)


def test_box_json_roundtrip():
    b = box(1, 2, 3, 4)
    assert b.to_json() == [1, 2, 3, 4]
    assert BoundingBox.from_json([1, 2, 3, 4]) == b
