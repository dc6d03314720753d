import math

import numpy as np
import pytest

from icetrack import dataset as ds
from icetrack.config import from_dict
from icetrack.geometry import (
    FanGeometry,
    RigidTransform,
    box_aspect_ratio,
    frame_from_heading,
    heading_from_angles,
    relative_pose,
    rotation_angle_from_diagonal,
    rotation_angle_from_heading,
    angular_error,
)
from icetrack.simulator import (
    BackgroundModel,
    MotionProfile,
    TipAppearanceModel,
    TrajectoryScene,
    check_split_seeds,
    generate_dataset,
    generate_trajectory,
    plan_dataset,
    render_frame,
    simulate_sequence,
)

from conftest import SMALL_SCENE, small_config

BLACK = BackgroundModel(mean_intensity=0.0, frame_noise=0.0)


def tip_pose(a_entry, a_rot, at=(20.0, 0.0, 0.0)):
    return RigidTransform(frame_from_heading(heading_from_angles(a_entry, a_rot)), np.asarray(at))


# -- trajectories ------------------------------------------------------------

@pytest.mark.parametrize("speed,step", [(20.0, 0.8), (10.0, 0.4), (15.0, 0.6)])
def test_per_frame_displacement(speed, step):
    for kind in ("insertion", "withdrawal", "mixed"):
        prof = MotionProfile(kind, speed, 25.0, 20, 40.0, seed=3)
        poses = generate_trajectory(prof, 5)
        d = [np.linalg.norm(b.translation - a.translation) for a, b in zip(poses, poses[1:])]
        np.testing.assert_allclose(d, step, rtol=1e-9)


def test_displacement_is_along_heading():
    prof = MotionProfile("mixed", 12.0, 25.0, 20, 50.0, seed=9)
    poses = generate_trajectory(prof, 1)
    signs = []
    for a, b in zip(poses, poses[1:]):
        delta = b.translation - a.translation
        cos = delta @ b.heading / np.linalg.norm(delta)
        assert abs(abs(cos) - 1) < 1e-9
        signs.append(np.sign(cos))
    assert signs[0] > 0 and signs[-1] < 0  # mixed reverses once
    assert sum(1 for s, t in zip(signs, signs[1:]) if s != t) == 1


def test_heading_drift_bound():
    prof = MotionProfile("insertion", 15.0, 25.0, 30, 75.0, seed=4)
    poses = generate_trajectory(prof, 2)
    limit = math.radians(75.0 / 25.0) + 1e-12
    for a, b in zip(poses, poses[1:]):
        assert math.acos(np.clip(a.heading @ b.heading, -1, 1)) <= limit


def test_trajectory_deterministic():
    prof = MotionProfile("mixed", 17.0, 25.0, 12, 60.0, seed=8)
    a = generate_trajectory(prof, 21)
    b = generate_trajectory(prof, 21)
    assert all(x == y for x, y in zip(a, b))
    c = generate_trajectory(prof, 22)
    assert not all(x == y for x, y in zip(a, c))


def test_motion_profile_validation():
    with pytest.raises(ValueError):
        MotionProfile(speed_mm_s=25.0)
    with pytest.raises(ValueError):
        MotionProfile(kind="sideways")
    with pytest.raises(ValueError):
        MotionProfile(n_frames=5)
    MotionProfile(speed_mm_s=25.0, allow_any_speed=True)


def test_trajectory_in_world_frame():
    rng = np.random.default_rng(0)
    from test_geometry import random_transform

    ice = random_transform(rng)
    prof = MotionProfile("insertion", 15.0, 25.0, 10, 30.0, seed=1)
    local = generate_trajectory(prof, 3, TrajectoryScene(e_world_ice=RigidTransform.identity()))
    world = generate_trajectory(prof, 3, TrajectoryScene(e_world_ice=ice))
    for l, w in zip(local, world):
        assert relative_pose(ice, w).allclose(l, 1e-9)


# -- rendering ---------------------------------------------------------------

FINE_FAN = FanGeometry(angular_span=90.0, max_depth=40.0, image_width=224, image_height=224)


def test_perpendicular_tip_is_a_disc():
    tip = TipAppearanceModel(blur_sigma_px=0.0, intensity_jitter_std=0.0)
    img, ann = render_frame(FINE_FAN, BLACK, tip, RigidTransform.identity(), tip_pose(90.0, 0.0, (20, 5, 0)), np.random.default_rng(0))
    assert ann.visible
    d_px = tip.diameter_mm / FINE_FAN.mm_per_px
    assert ann.box.width * FINE_FAN.image_width == pytest.approx(d_px)
    assert ann.box.height * FINE_FAN.image_height == pytest.approx(d_px)


def test_in_plane_tip_full_length():
    tip = TipAppearanceModel(blur_sigma_px=0.0, intensity_jitter_std=0.0)
    img, ann = render_frame(FINE_FAN, BLACK, tip, RigidTransform.identity(), tip_pose(0.0, 0.0), np.random.default_rng(0))
    assert ann.visible
    h = ann.box.height * FINE_FAN.image_height
    w = ann.box.width * FINE_FAN.image_width
    assert h > w
    assert h / w == pytest.approx(tip.length_mm / tip.diameter_mm)
    assert ann.angle.a_entry == pytest.approx(0.0, abs=1e-9)
    assert ann.angle.a_rot == pytest.approx(0.0, abs=1e-9)


def test_foreshortening():
    tip = TipAppearanceModel(blur_sigma_px=0.0)
    _, ann = render_frame(FINE_FAN, BLACK, tip, RigidTransform.identity(), tip_pose(60.0, 0.0, (20, 0, 0)), np.random.default_rng(0))
    h_mm = ann.box.height * FINE_FAN.image_height * FINE_FAN.mm_per_px
    assert h_mm == pytest.approx(tip.length_mm * math.cos(math.radians(60.0)))


def tight_box(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return np.array([cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h])


def test_annotation_box_matches_rendered_mask():
    """Analytic box vs tight box of the thresholded render, 200 random scenes.

    Rendered at 448x448 so pixel quantization stays well below the tolerance.
    """
    from icetrack.geometry import BoundingBox, iou

    rng = np.random.default_rng(1)
    tip = TipAppearanceModel(blur_sigma_px=0.0, intensity_jitter_std=0.0)
    fan = FanGeometry(angular_span=90.0, max_depth=40.0, image_width=448, image_height=448)
    fan_mask = fan.mask()
    checked = 0
    while checked < 200:
        e, r = rng.uniform(-75, 75), rng.uniform(-170, 170)
        depth, polar = rng.uniform(10, 32), math.radians(rng.uniform(-30, 30))
        at = (depth * math.cos(polar), rng.uniform(-3, 3), depth * math.sin(polar))
        img, ann = render_frame(fan, BLACK, tip, RigidTransform.identity(), tip_pose(e, r, at), rng)
        if not ann.visible:
            continue
        b = ann.box
        rows = slice(int(b.y_min * 448), int(math.ceil(b.y_max * 448)))
        cols = slice(int(b.x_min * 448), int(math.ceil(b.x_max * 448)))
        if not fan_mask[rows, cols].all():
            continue  # footprint cut by the fan edge
        mask = img > tip.peak_intensity / 2
        assert iou(ann.box, BoundingBox(*tight_box(mask))) >= 0.9
        checked += 1


def test_fan_masking_and_range():
    fan = FanGeometry(angular_span=60, max_depth=40, image_width=64, image_height=64)
    outside = ~fan.mask()
    bg = BackgroundModel(seed=3)
    tip = TipAppearanceModel()
    rng = np.random.default_rng(0)
    for k in range(5):
        img, _ = render_frame(fan, bg, tip, RigidTransform.identity(), tip_pose(30, 10 * k, (25, 1, 0)), rng)
        assert img.min() >= 0 and img.max() <= 1
        assert np.abs(img[outside]).max() <= 1e-6


def test_off_fan_tip_invisible():
    fan = FanGeometry(angular_span=60, max_depth=40, image_width=64, image_height=64)
    img, ann = render_frame(fan, BLACK, TipAppearanceModel(), RigidTransform.identity(), tip_pose(30, 0, (80, 0, 0)), np.random.default_rng(0))
    assert not ann.visible and ann.box is None
    assert img.max() == 0.0
    img, ann = render_frame(fan, BLACK, TipAppearanceModel(), RigidTransform.identity(), tip_pose(0, 0, (20, 5, 0)), np.random.default_rng(0))
    assert not ann.visible  # in-plane heading far off the plane never crosses it


# -- sequence-level properties ----------------------------------------------

def _sequences(n=12):
    cfg = from_dict({"scene": {**SMALL_SCENE, "fan": {"angular_span": 60.0, "max_depth": 40.0, "image_width": 64, "image_height": 64}, "motion": {"n_frames": 16, "drift_range_deg_s": [40.0, 100.0]}}})
    return cfg, [simulate_sequence(cfg, 5, s, "train") for s in range(n)]


def test_sequences_are_visible_and_continuous():
    cfg, seqs = _sequences()
    fan = FanGeometry(60.0, 40.0, 64, 64)
    for _, anns, meta in seqs:
        assert all(a.visible for a in anns)
        budget = meta["speed_mm_s"] / meta["frame_rate_hz"] / fan.mm_per_px + 2.0
        for a, b in zip(anns, anns[1:]):
            ca = np.array(a.box.center) * 64
            cb = np.array(b.box.center) * 64
            assert np.linalg.norm(cb - ca) <= budget


def test_diagonal_annotation_consistency():
    cfg, seqs = _sequences()
    fan = FanGeometry(60.0, 40.0, 64, 64)
    diameter = cfg.scene.tip.diameter_mm
    checked = 0
    for _, anns, _ in seqs:
        for a in anns:
            b = a.box
            clipped = min(b.x_min, b.y_min) <= 0 or max(b.x_max, b.y_max) >= 1
            if clipped or box_aspect_ratio(b, fan) < 1.5:
                continue
            h = a.tip_pose.heading
            diag = rotation_angle_from_diagonal(b, [h[0], h[2]], fan, tip_diameter_mm=diameter)
            assert angular_error(diag, rotation_angle_from_heading(a.tip_pose)) <= 10.0
            checked += 1
    assert checked > 50


def test_sequence_deterministic():
    cfg, _ = _sequences(0)
    a = simulate_sequence(cfg, 5, 3, "train")
    b = simulate_sequence(cfg, 5, 3, "train")
    for x, y in zip(a[0], b[0]):
        assert x.tobytes() == y.tobytes()
    assert [r.to_dict() for r in a[1]] == [r.to_dict() for r in b[1]]
    assert a[2] == b[2]


def test_speckle_backgrounds_differ_by_seed():
    fan = FanGeometry(60.0, 40.0, 64, 64)
    a = BackgroundModel(seed=1).image(fan)
    b = BackgroundModel(seed=2).image(fan)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, BackgroundModel(seed=1).image(fan))


# -- dataset generation ------------------------------------------------------

def test_desk_scale_bookkeeping(tmp_path):
    cfg = small_config(train={"count": 200, "seed_start": 0}, val={"count": 16, "seed_start": 100_000}, test={"count": 24, "seed_start": 200_000})
    cfg.scene.motion.n_frames = 6
    cfg.model.n_frames = 3
    m = generate_dataset(cfg, seed=1, out=tmp_path)
    assert {k: v["count"] for k, v in m["splits"].items()} == {"train": 200, "val": 16, "test": 24}
    assert {k: len(v["sequence_ids"]) for k, v in m["splits"].items()} == {"train": 200, "val": 16, "test": 24}
    seeds = [set(v["seeds"]) for v in m["splits"].values()]
    assert not (seeds[0] & seeds[1] or seeds[0] & seeds[2] or seeds[1] & seeds[2])
    ds.verify_integrity(tmp_path)


def test_full_scale_plan_accepted():
    cfg = small_config(train={"count": 5400, "seed_start": 0}, val={"count": 48, "seed_start": 10_000}, test={"count": 250, "seed_start": 20_000})
    plan = plan_dataset(cfg)
    assert {k: len(v) for k, v in plan.items()} == {"train": 5400, "val": 48, "test": 250}


def test_overlapping_seed_ranges_rejected(tmp_path):
    cfg = small_config(train={"count": 10, "seed_start": 0}, test={"count": 5, "seed_start": 8})
    with pytest.raises(ds.SplitOverlap, match="share seeds 8..9"):
        check_split_seeds(cfg)
    with pytest.raises(ds.SplitOverlap):
        generate_dataset(cfg, seed=0, out=tmp_path)
    assert not (tmp_path / ds.MANIFEST_NAME).exists()


def test_regeneration_byte_identical(tmp_path, small_cfg, small_dataset):
    generate_dataset(small_cfg, seed=11, out=tmp_path)
    assert ds.manifest_hash(tmp_path) == ds.manifest_hash(small_dataset)
    for p in sorted(small_dataset.rglob("*")):
        if p.is_file():
            q = tmp_path / p.relative_to(small_dataset)
            assert q.read_bytes() == p.read_bytes(), p


def test_different_seed_changes_data(tmp_path, small_cfg, small_dataset):
    generate_dataset(small_cfg, seed=12, out=tmp_path)
    assert ds.manifest_hash(tmp_path) != ds.manifest_hash(small_dataset)


def test_image_pool_backgrounds(tmp_path):
    from PIL import Image

    pools = {}
    for split, vals in (("train", (40, 80)), ("val", (90,)), ("test", (120, 160))):
        d = tmp_path / f"pool_{split}"
        d.mkdir()
        for v in vals:
            Image.fromarray(np.full((48, 48), v, np.uint8)).save(d / f"{v}.png")
        pools[split] = [str(d)]
    cfg = small_config()
    cfg.scene.background.mode = "image_pool"
    cfg.scene.background.pools = pools
    m = generate_dataset(cfg, seed=0, out=tmp_path / "out")
    train_ids = set(m["splits"]["train"]["background_ids"])
    test_ids = set(m["splits"]["test"]["background_ids"])
    assert train_ids and test_ids and not train_ids & test_ids

    # the same image in train and test pools is refused
    shared = tmp_path / "pool_test" / "dup.png"
    shared.write_bytes((tmp_path / "pool_train" / "40.png").read_bytes())
    with pytest.raises(ds.SplitOverlap):
        generate_dataset(cfg, seed=0, out=tmp_path / "out2")
