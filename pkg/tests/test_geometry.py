import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgbev.geometry import (
    Box3D,
    Pose,
    angle_wrap,
    bev_iou,
    box_corners_bev,
    pose_compose,
    pose_inverse,
    relative_transform,
    transform_box,
    transform_points,
)

yaws = st.floats(min_value=-10.0, max_value=10.0)
coords = st.floats(min_value=-100.0, max_value=100.0)


def rand_pose(rng):
    return Pose(rng.uniform(-50, 50, 3), rng.uniform(-np.pi, np.pi))


def test_relative_transform_same_pose_is_identity():
    p = Pose(np.array([3.0, -2.0, 1.0]), 0.7)
    t = relative_transform(p, p)
    assert np.allclose(t.translation, 0.0, atol=1e-12)
    assert abs(t.yaw) <= 1e-12


def test_relative_transform_pure_translation():
    src = Pose(np.zeros(3), 0.0)
    dst = Pose(np.array([5.0, 0.0, 0.0]), 0.0)
    t = relative_transform(src, dst)
    pts = transform_points(t, np.array([[0.0, 0.0, 0.0, 1.0]]))
    assert np.allclose(pts[0, :3], [-5.0, 0.0, 0.0], atol=1e-12)
    assert pts[0, 3] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_transform_roundtrip_recovers_points(seed):
    rng = np.random.default_rng(seed)
    src, dst = rand_pose(rng), rand_pose(rng)
    pts = rng.uniform(-40, 40, size=(50, 4))
    fwd = relative_transform(src, dst)
    back = relative_transform(dst, src)
    rec = transform_points(back, transform_points(fwd, pts))
    np.testing.assert_allclose(rec, pts, atol=1e-10)


def test_compose_inverse_is_identity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = rand_pose(rng)
        ident = pose_compose(pose_inverse(p), p)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)
        assert abs(ident.yaw) <= 1e-12


@given(yaws)
@settings(max_examples=100, deadline=None)
def test_angle_wrap_idempotent_and_bounded(a):
    w = angle_wrap(a)
    assert -np.pi < w <= np.pi
    assert angle_wrap(w) == pytest.approx(w, abs=1e-12)


def test_angle_wrap_difference_bounded():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-20, 20, 100), rng.uniform(-20, 20, 100)
    assert np.all(np.abs(angle_wrap(a - b)) <= np.pi)


# ------------------------------------------------------------------ boxes


def test_box_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Box3D(np.zeros(3), np.array([1.0, 0.0, 1.0]), 0.0)


def test_box_corners_axis_aligned():
    b = Box3D(np.array([1.0, 2.0, 0.0]), np.array([4.0, 2.0, 1.5]), 0.0)
    corners = box_corners_bev(b)
    assert corners.shape == (4, 2)
    assert np.allclose(sorted(corners[:, 0]), [-1.0, -1.0, 3.0, 3.0])
    assert np.allclose(sorted(corners[:, 1]), [1.0, 1.0, 3.0, 3.0])


# ------------------------------------------------------------------ IoU


def test_iou_identical_boxes():
    b = Box3D(np.array([1.0, 1.0, 0.0]), np.array([4.0, 2.0, 1.5]), 0.3)
    assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-12)


def test_iou_disjoint_boxes():
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.array([10.0, 0.0, 0.0]), np.ones(3), 0.0)
    assert bev_iou(a, b) == 0.0


def test_iou_half_overlap_unit_squares():
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.array([0.5, 0.0, 0.0]), np.ones(3), 0.0)
    iou = bev_iou(a, b)
    assert iou == pytest.approx(1.0 / 3.0, abs=1e-12)

    # Monte-Carlo area oracle over the bounding region
    rng = np.random.default_rng(42)
    pts = rng.uniform([-0.5, -0.5], [1.0, 0.5], size=(1_000_000, 2))
    in_a = (np.abs(pts[:, 0]) <= 0.5) & (np.abs(pts[:, 1]) <= 0.5)
    in_b = (np.abs(pts[:, 0] - 0.5) <= 0.5) & (np.abs(pts[:, 1]) <= 0.5)
    mc_iou = (in_a & in_b).mean() / (in_a | in_b).mean()
    assert abs(iou - mc_iou) <= 1e-3


def test_iou_rotated_45_degrees():
    # unit square vs same square rotated 45deg: intersection is a regular
    # octagon of area 2*(sqrt(2)-1), giving IoU exactly 1/sqrt(2)
    a = Box3D(np.zeros(3), np.ones(3), 0.0)
    b = Box3D(np.zeros(3), np.ones(3), np.pi / 4)
    inter = 2.0 * (np.sqrt(2) - 1.0)
    expected = inter / (2.0 - inter)
    assert expected == pytest.approx(1.0 / np.sqrt(2), abs=1e-12)
    assert bev_iou(a, b) == pytest.approx(expected, abs=1e-12)


def test_iou_symmetric():
    rng = np.random.default_rng(9)
    for _ in range(50):
        a = Box3D(rng.uniform(-3, 3, 3), rng.uniform(0.5, 4, 3), rng.uniform(-4, 4))
        b = Box3D(rng.uniform(-3, 3, 3), rng.uniform(0.5, 4, 3), rng.uniform(-4, 4))
        assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_iou_invariant_under_common_rigid_transform(seed):
    rng = np.random.default_rng(seed)
    a = Box3D(rng.uniform(-3, 3, 3), rng.uniform(0.5, 4, 3), rng.uniform(-4, 4))
    b = Box3D(a.center + rng.uniform(-2, 2, 3), rng.uniform(0.5, 4, 3), rng.uniform(-4, 4))
    base = bev_iou(a, b)
    t = Pose(rng.uniform(-30, 30, 3), rng.uniform(-np.pi, np.pi))
    moved = bev_iou(transform_box(t, a), transform_box(t, b))
    assert moved == pytest.approx(base, abs=1e-9)
