import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icetrack.geometry import (
    BoundingBox,
    DegenerateBox,
    DegenerateProjection,
    FanGeometry,
    GeometryError,
    IncidentAngle,
    NoIntersection,
    OutOfPlane,
    PixelPoint,
    RigidTransform,
    angular_error,
    compose,
    entry_angle,
    frame_from_heading,
    heading_from_angles,
    in_fan,
    invert,
    iou,
    passing_point,
    relative_pose,
    rotation_about,
    rotation_angle_from_diagonal,
    rotation_angle_from_heading,
    world_to_pixel,
)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_transform(rng):
    return RigidTransform(random_rotation(rng), rng.uniform(-100, 100, 3))


def pose_with_heading(h, t=(0.0, 0.0, 0.0), roll=0.0):
    return RigidTransform(frame_from_heading(np.asarray(h, float), roll), np.asarray(t, float))


# -- RigidTransform ----------------------------------------------------------

def test_rejects_improper_rotation():
    with pytest.raises(GeometryError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(GeometryError):
        RigidTransform(np.eye(3) * 1.01, np.zeros(3))


def test_compose_identity():
    t = random_transform(np.random.default_rng(0))
    assert compose(RigidTransform.identity(), t).allclose(t, 1e-12)
    assert compose(t, invert(t)).allclose(RigidTransform.identity(), 1e-9)


def test_compose_matches_pointwise_application():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_transform(rng), random_transform(rng)
        pts = rng.uniform(-50, 50, (100, 3))
        np.testing.assert_allclose(compose(a, b).apply(pts), a.apply(b.apply(pts)), atol=1e-9)


def test_compose_associative():
    rng = np.random.default_rng(2)
    a, b, c = (random_transform(rng) for _ in range(3))
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)), 1e-9)


def test_invert_simple_cases():
    assert invert(RigidTransform.identity()).allclose(RigidTransform.identity(), 0)
    t = invert(RigidTransform(np.eye(3), [1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(t.translation, [-1.0, -2.0, -3.0])


def test_invert_matches_homogeneous_matrix_inverse():
    rng = np.random.default_rng(3)
    for _ in range(50):
        t = random_transform(rng)
        np.testing.assert_allclose(invert(t).as_matrix(), np.linalg.inv(t.as_matrix()), atol=1e-9)
        assert invert(invert(t)).allclose(t, 1e-9)


def test_relative_pose_cases():
    rng = np.random.default_rng(4)
    t = random_transform(rng)
    assert relative_pose(t, t).allclose(RigidTransform.identity(), 1e-9)
    assert relative_pose(RigidTransform.identity(), t).allclose(t, 1e-12)


def test_relative_pose_round_trip_1000():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        ice, tip = random_transform(rng), random_transform(rng)
        rel = relative_pose(ice, tip)
        assert np.abs(compose(ice, rel).as_matrix() - tip.as_matrix()).max() < 1e-9


def test_compose_inverse_frobenius_1000():
    rng = np.random.default_rng(6)
    for _ in range(1000):
        t = random_transform(rng)
        assert np.linalg.norm(compose(t, invert(t)).as_matrix() - np.eye(4)) < 1e-9


# -- angles ------------------------------------------------------------------

def test_entry_angle_cases():
    assert entry_angle(pose_with_heading([1, 0, 0])) == pytest.approx(0.0, abs=1e-12)
    assert entry_angle(pose_with_heading([0, 1, 0])) == pytest.approx(90.0)
    assert entry_angle(pose_with_heading([1, 1, 0])) == pytest.approx(45.0)
    assert entry_angle(pose_with_heading([1, -1, 0])) == pytest.approx(-45.0)


def test_entry_angle_invariant_to_roll():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        r = random_rotation(rng)
        t = RigidTransform(r, rng.uniform(-10, 10, 3))
        spun = RigidTransform(r @ rotation_about([0, 0, 1], rng.uniform(0, 2 * math.pi)), t.translation)
        assert abs(entry_angle(t) - entry_angle(spun)) < 1e-9


def test_rotation_angle_from_heading_cases():
    assert rotation_angle_from_heading(pose_with_heading([1, 0, 0])) == pytest.approx(0.0, abs=1e-12)
    assert rotation_angle_from_heading(pose_with_heading([0, 0, 1])) == pytest.approx(90.0)
    assert rotation_angle_from_heading(pose_with_heading([1, 0.5, 1])) == pytest.approx(45.0)
    assert rotation_angle_from_heading(pose_with_heading([-1, 0, 0])) == pytest.approx(180.0)
    with pytest.raises(DegenerateProjection):
        rotation_angle_from_heading(pose_with_heading([0, 1, 0]))


@given(
    st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3),
    st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3),
    st.floats(-5, 5),
    st.floats(0.1, 10),
)
def test_rotation_angle_ignores_y_component(x, z, y, scale):
    a = rotation_angle_from_heading(pose_with_heading([x, y, z]))
    b = rotation_angle_from_heading(pose_with_heading([x, y * scale, z]))
    assert abs(angular_error(a, b)) < 1e-9


def test_heading_from_angles_inverts_angle_ops():
    rng = np.random.default_rng(8)
    for _ in range(200):
        e, r = rng.uniform(-89, 89), rng.uniform(-179, 179)
        pose = pose_with_heading(heading_from_angles(e, r), roll=rng.uniform(0, 6))
        assert entry_angle(pose) == pytest.approx(e, abs=1e-9)
        assert rotation_angle_from_heading(pose) == pytest.approx(r, abs=1e-9)


# -- diagonal ----------------------------------------------------------------

FAN = FanGeometry(angular_span=90, max_depth=100, image_width=200, image_height=200, mm_per_px=0.5)


def test_diagonal_square_box():
    box = BoundingBox(0.2, 0.2, 0.4, 0.4)
    assert rotation_angle_from_diagonal(box, [1, 1], FAN) == pytest.approx(45.0)
    rev = rotation_angle_from_diagonal(box, [-1, -1], FAN)
    assert angular_error(rev, 45.0) == pytest.approx(180.0)


def test_diagonal_picks_anti_diagonal():
    box = BoundingBox(0.2, 0.2, 0.4, 0.4)
    assert rotation_angle_from_diagonal(box, [1, -1], FAN) == pytest.approx(-45.0)


def test_diagonal_uses_pixel_scale():
    # non-square pixels: 2 px wide columns vs 1 px rows in mm
    fan = FanGeometry(image_width=100, image_height=200, mm_per_px=0.5)
    box = BoundingBox(0.2, 0.2, 0.4, 0.3)  # 20 px wide, 20 px tall
    assert rotation_angle_from_diagonal(box, [1, 1], fan) == pytest.approx(45.0)


def test_diagonal_thickness_correction():
    # in-plane capsule of 10 mm x 3 mm along the centerline: box 3 mm wide, 10 mm tall
    box = BoundingBox(0.5 - 3 / 200, 0.2, 0.5 + 3 / 200, 0.2 + 10 / 100)
    assert rotation_angle_from_diagonal(box, [1, 0.01], FAN) == pytest.approx(math.degrees(math.atan2(3, 10)))
    assert rotation_angle_from_diagonal(box, [1, 0.01], FAN, tip_diameter_mm=3.0) == pytest.approx(0.0)


def test_diagonal_degenerate():
    thin = BoundingBox(0.3, 0.2, 0.3 + 1e-8, 0.5)
    assert rotation_angle_from_diagonal(thin, [1, 0.2], FAN) == pytest.approx(0.0)
    assert rotation_angle_from_diagonal(thin, [-1, 0.2], FAN) == pytest.approx(180.0)
    flat = BoundingBox(0.2, 0.3, 0.5, 0.3 + 1e-8)
    assert rotation_angle_from_diagonal(flat, [0.1, -1], FAN) == pytest.approx(-90.0)
    dot = BoundingBox(0.3, 0.3, 0.3 + 1e-8, 0.3 + 1e-8)
    with pytest.raises(DegenerateBox):
        rotation_angle_from_diagonal(dot, [1, 1], FAN)


# -- passing point / pixels --------------------------------------------------

def test_passing_point_cases():
    np.testing.assert_allclose(passing_point([10, 5, 0], [0, -1, 0]), [10, 0, 0])
    np.testing.assert_allclose(passing_point([10, 0, 5], [1, 1e-9, 0]), [10, 0, 5])
    h = np.array([0, -1, 1]) / math.sqrt(2)
    np.testing.assert_allclose(passing_point([20, 4, 0], h), [20, 0, 4], atol=1e-12)
    with pytest.raises(NoIntersection):
        passing_point([0, 5, 0], [1, 0, 0])


def test_passing_point_on_line_and_plane():
    rng = np.random.default_rng(9)
    for _ in range(200):
        p = rng.uniform(-20, 20, 3)
        h = rng.standard_normal(3)
        h /= np.linalg.norm(h)
        if abs(h[1]) < 1e-3:
            continue
        q = passing_point(p, h)
        assert abs(q[1]) < 1e-9
        assert np.linalg.norm(np.cross(q - p, h)) < 1e-9


def test_world_to_pixel_and_in_fan():
    fan = FanGeometry()
    apex = world_to_pixel(fan, [0, 0, 0])
    assert (apex.u, apex.v) == (fan.image_width / 2, 0.0)
    assert in_fan(fan, apex)
    assert not in_fan(fan, world_to_pixel(fan, [fan.max_depth + 1, 0, 0]))
    with pytest.raises(OutOfPlane):
        world_to_pixel(fan, [1, 1e-3, 0])


def test_in_fan_polar_angle_boundary():
    fan = FanGeometry(angular_span=60, max_depth=100)
    for half, expect in ((29.0, True), (31.0, False)):
        th = math.radians(half)
        p = world_to_pixel(fan, [50 * math.cos(th), 0, 50 * math.sin(th)])
        assert in_fan(fan, p) is expect


def test_in_fan_image_bounds():
    fan = FanGeometry(angular_span=170, max_depth=100, image_width=50, image_height=100, mm_per_px=1.0)
    assert not in_fan(fan, PixelPoint(-1.0, 10.0))


def test_fan_validation():
    with pytest.raises(GeometryError):
        FanGeometry(angular_span=180)
    with pytest.raises(GeometryError):
        FanGeometry(max_depth=0)
    fan = FanGeometry()
    assert abs(fan.centerline @ fan.plane_normal) < 1e-12


# -- boxes, IoU, angular error ----------------------------------------------

def test_box_validation():
    with pytest.raises(GeometryError):
        BoundingBox(0.5, 0.1, 0.4, 0.2)
    with pytest.raises(GeometryError):
        BoundingBox(-0.1, 0.1, 0.4, 0.2)
    with pytest.raises(GeometryError):
        IncidentAngle(91, 0)
    with pytest.raises(GeometryError):
        IncidentAngle(0, -180)


def test_iou_fixtures():
    a = BoundingBox(0, 0, 0.4, 0.4)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(0.5, 0.5, 0.9, 0.9)) == 0.0
    assert iou(a, BoundingBox(0.2, 0, 0.6, 0.4)) == pytest.approx(1 / 3)


def pixel_iou(a: BoundingBox, b: BoundingBox, n: int = 1000) -> float:
    c = (np.arange(n) + 0.5) / n
    xa = (c >= a.x_min) & (c < a.x_max)
    ya = (c >= a.y_min) & (c < a.y_max)
    xb = (c >= b.x_min) & (c < b.x_max)
    yb = (c >= b.y_min) & (c < b.y_max)
    ma = ya[:, None] & xa[None, :]
    mb = yb[:, None] & xb[None, :]
    union = (ma | mb).sum()
    return float((ma & mb).sum() / union) if union else 0.0


def random_box_pair(rng):
    """Boxes with sides in [0.25, 0.65], offset so that overlaps range from none to full."""
    def one(x, y):
        w, h = rng.uniform(0.25, 0.65, 2)
        x, y = min(x, 1 - w), min(y, 1 - h)
        return BoundingBox(x, y, x + w, y + h)

    a = one(*rng.uniform(0, 0.8, 2))
    b = one(*np.clip(np.array([a.x_min, a.y_min]) + rng.uniform(-0.4, 0.4, 2), 0, 0.8))
    return a, b


def test_iou_matches_pixel_counting():
    rng = np.random.default_rng(10)
    for _ in range(100):
        a, b = random_box_pair(rng)
        assert abs(iou(a, b) - pixel_iou(a, b)) < 2e-3


box_st = st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.1), st.floats(0.01, 0.1)).map(
    lambda t: BoundingBox(t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(box_st, box_st)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    if v == 1.0:
        np.testing.assert_allclose(a.as_array(), b.as_array(), atol=1e-12)


def test_angular_error_fixtures():
    assert angular_error(10, 10) == 0
    assert angular_error(-170, 175) == 15
    assert angular_error(350, 10) == 20
    assert angular_error(0, 180) == 180


def test_angular_error_pseudometric():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a, b, c = rng.uniform(-720, 720, 3)
        assert angular_error(a, b) == pytest.approx(angular_error(b, a))
        assert 0 <= angular_error(a, b) <= 180
        assert angular_error(a, c) <= angular_error(a, b) + angular_error(b, c) + 1e-9


@settings(max_examples=200)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_angular_error_range(a, b):
    assert 0.0 <= angular_error(a, b) <= 180.0
