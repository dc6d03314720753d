"""Synthetic annotated ICE sequences.

A sequence is a seeded tip trajectory (insertion / withdrawal / mixed at
10-20 mm/s, slow heading drift) observed by a fixed ICE catheter. Each frame
is a procedural speckle fan with the tip drawn as an anti-aliased capsule at
the passing point; annotations come from the geometry module, not from the
pixels.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dataset as ds
from .config import BackgroundConfig, Config, MotionConfig, TipConfig
from .geometry import (
    Y_AXIS,
    BoundingBox,
    DegenerateProjection,
    FanGeometry,
    IncidentAngle,
    NoIntersection,
    PixelPoint,
    RigidTransform,
    compose,
    entry_angle,
    frame_from_heading,
    heading_from_angles,
    in_fan,
    passing_point,
    relative_pose,
    rotation_about,
    rotation_angle_from_heading,
    world_to_pixel,
)

MOTION_KINDS = ("insertion", "withdrawal", "mixed")


@dataclass(frozen=True)
class MotionProfile:
    kind: str = "insertion"
    speed_mm_s: float = 15.0
    frame_rate_hz: float = 25.0
    n_frames: int = 20
    heading_drift_deg_s: float = 30.0
    seed: int = 0
    allow_any_speed: bool = False

    def __post_init__(self):
        if self.kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if not self.allow_any_speed and not 10.0 <= self.speed_mm_s <= 20.0:
            raise ValueError(f"speed {self.speed_mm_s} mm/s outside the 10-20 mm/s band")
        if self.speed_mm_s <= 0 or self.frame_rate_hz <= 0:
            raise ValueError("speed and frame rate must be positive")
        if self.n_frames < 6:
            raise ValueError("n_frames must be >= 6")
        if self.heading_drift_deg_s < 0:
            raise ValueError("heading drift must be non-negative")

    @property
    def step_mm(self) -> float:
        return self.speed_mm_s / self.frame_rate_hz


@dataclass(frozen=True)
class TipAppearanceModel:
    length_mm: float = 10.0
    diameter_mm: float = 3.0  # 9 Fr
    peak_intensity: float = 0.9
    intensity_jitter_std: float = 0.05
    blur_sigma_px: float = 0.7

    def __post_init__(self):
        if not self.length_mm > self.diameter_mm > 0:
            raise ValueError("need length_mm > diameter_mm > 0")
        if not 0 < self.peak_intensity <= 1:
            raise ValueError("peak_intensity must be in (0, 1]")

    @classmethod
    def from_config(cls, c: TipConfig) -> "TipAppearanceModel":
        return cls(c.length_mm, c.diameter_mm, c.peak_intensity, c.intensity_jitter_std, c.blur_sigma_px)


@dataclass(frozen=True)
class BackgroundModel:
    """Static per-sequence background.

    ``procedural_speckle`` draws a speckle field from ``seed``; ``image_pool``
    uses ``pool_image`` (already loaded). ``pool_id`` identifies the source for
    split-disjointness checks.
    """

    mode: str = "procedural_speckle"
    seed: int = 0
    grain_px: float = 1.5
    mean_intensity: float = 0.25
    contrast: float = 0.5
    frame_noise: float = 0.03
    pool_id: str | None = None
    pool_image: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def identifier(self) -> str:
        if self.mode == "image_pool":
            return f"pool:{self.pool_id}"
        return f"speckle:{self.seed}"

    def image(self, fan: FanGeometry) -> np.ndarray:
        if self.mode == "image_pool":
            if self.pool_image is None:
                raise ValueError("image_pool background without an image")
            return _fit_pool_image(self.pool_image, fan) * fan.mask()
        return speckle_background(fan, self.seed, self.grain_px, self.mean_intensity, self.contrast)


def speckle_background(fan: FanGeometry, seed: int, grain_px: float, mean: float, contrast: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = fan.shape
    re = ndimage.gaussian_filter(rng.standard_normal((h, w)), grain_px)
    im = ndimage.gaussian_filter(rng.standard_normal((h, w)), grain_px)
    speckle = np.hypot(re, im)
    speckle /= speckle.mean()
    # low-frequency tissue structure
    tissue = ndimage.gaussian_filter(rng.standard_normal((h, w)), max(h, w) / 16)
    tissue = 1.0 + 0.8 * tissue / (np.abs(tissue).max() + 1e-12)
    depth = np.linspace(1.0, 0.6, h)[:, None]
    img = mean * (1.0 + contrast * (speckle - 1.0)) * tissue * depth
    return np.clip(img, 0.0, 1.0) * fan.mask()


def _fit_pool_image(img: np.ndarray, fan: FanGeometry) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    if img.max() > 1.0:
        img = img / 255.0
    h, w = fan.shape
    zoom = (h / img.shape[0], w / img.shape[1])
    out = ndimage.zoom(img, zoom, order=1)[:h, :w]
    if out.shape != (h, w):
        out = np.pad(out, ((0, h - out.shape[0]), (0, w - out.shape[1])))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class TrajectoryScene:
    """Where a trajectory may start: fan, ICE pose and the sampling ranges."""

    fan: FanGeometry = field(default_factory=FanGeometry)
    e_world_ice: RigidTransform = field(default_factory=RigidTransform.identity)
    entry_range_deg: tuple[float, float] = (15.0, 70.0)
    rot_range_deg: float = 150.0
    depth_range: tuple[float, float] = (0.3, 0.8)
    polar_fraction: float = 0.7

    @classmethod
    def from_config(cls, m: MotionConfig, fan: FanGeometry, e_world_ice: RigidTransform) -> "TrajectoryScene":
        return cls(fan, e_world_ice, tuple(m.entry_range_deg), m.rot_range_deg, tuple(m.depth_range), m.polar_fraction)


AnnotationRecord = ds.AnnotationRecord


def _passing_px(fan: FanGeometry, r: np.ndarray, p: np.ndarray) -> np.ndarray | None:
    try:
        pp = passing_point(p, r[:, 2])
    except NoIntersection:
        return None
    return np.array([pp[2], pp[0]]) / fan.mm_per_px


def _drift_step(r, p, phi, delta, fan, budget_px, entry_lim, rot_lim):
    """Rotate the tip frame about the tip by up to ``delta`` rad.

    Tries the current drift direction, then the reverse one, halving the angle
    until the entry/rotation limits and the passing-point budget hold.
    Returns the new rotation and the (possibly reversed) drift phase.
    """
    if delta == 0.0:
        return r, phi
    prev_px = _passing_px(fan, r, p)
    h = r[:, 2]
    tilt = np.cross(h, Y_AXIS)
    nt = np.linalg.norm(tilt)
    tilt = tilt / nt if nt > 1e-9 else np.array([0.0, 0.0, 1.0])
    for phase in (phi, phi + math.pi):
        axis = math.cos(phase) * tilt + math.sin(phase) * Y_AXIS
        ang = delta
        for _ in range(12):
            cand = rotation_about(axis, ang) @ r
            ch = cand[:, 2]
            e = abs(math.degrees(math.asin(np.clip(ch[1], -1, 1))))
            rot = abs(math.degrees(math.atan2(ch[2], ch[0])))
            new_px = _passing_px(fan, cand, p)
            if (
                entry_lim[0] <= e <= entry_lim[1]
                and rot <= rot_lim
                and prev_px is not None
                and new_px is not None
                and np.linalg.norm(new_px - prev_px) <= budget_px
            ):
                return cand, phase
            ang *= 0.5
    return r, phi


def generate_trajectory(profile: MotionProfile, scene_seed, scene: TrajectoryScene | None = None) -> list[RigidTransform]:
    """World poses of the tip, one per frame.

    The tip advances (insertion) or retracts (withdrawal) by exactly
    ``speed / frame_rate`` mm per frame along its current heading; ``mixed``
    reverses once at a seeded frame. The heading rotates about the tip by at
    most ``drift / frame_rate`` degrees per frame; a step is shrunk when it
    would move the passing point by more than the continuity budget.
    """
    scene = scene or TrajectoryScene()
    fan = scene.fan
    srng = np.random.default_rng(scene_seed)
    mrng = np.random.default_rng(profile.seed)
    n = profile.n_frames
    step = profile.step_mm

    depth = srng.uniform(*scene.depth_range) * fan.max_depth
    polar = math.radians(srng.uniform(-1, 1) * scene.polar_fraction * fan.angular_span / 2)
    p0 = np.array([depth * math.cos(polar), 0.0, depth * math.sin(polar)])
    e_mag = srng.uniform(*scene.entry_range_deg)
    a_entry = e_mag if srng.random() < 0.5 else -e_mag
    a_rot = srng.uniform(-scene.rot_range_deg, scene.rot_range_deg)
    roll = srng.uniform(0, 2 * math.pi)
    r = frame_from_heading(heading_from_angles(a_entry, a_rot), roll)

    switch = int(mrng.integers(max(2, n // 4), max(3, (3 * n) // 4)))
    if profile.kind == "insertion":
        directions = [1.0] * n
        s0 = -step * (n - 1)
    elif profile.kind == "withdrawal":
        directions = [-1.0] * n
        s0 = 0.0
    else:
        directions = [1.0 if k <= switch else -1.0 for k in range(n)]
        s0 = -step * switch
    p = p0 + s0 * r[:, 2]

    # drift axis: mix of tilt (changes entry) and spin about the plane normal (changes rotation)
    phi = mrng.uniform(0, 2 * math.pi)
    delta = math.radians(profile.heading_drift_deg_s / profile.frame_rate_hz)
    budget_px = 0.9 * (step / fan.mm_per_px + 2.0)
    lo = max(scene.entry_range_deg[0] - 10.0, 3.0)
    hi = min(scene.entry_range_deg[1] + 10.0, 85.0)
    rot_lim = min(scene.rot_range_deg + 20.0, 179.0)

    poses = [(r.copy(), p.copy())]
    for k in range(1, n):
        r, phi = _drift_step(r, p, phi, delta, fan, budget_px, (lo, hi), rot_lim)
        p = p + directions[k] * step * r[:, 2]
        poses.append((r.copy(), p.copy()))

    out = []
    for rk, pk in poses:
        out.append(compose(scene.e_world_ice, RigidTransform(rk, pk)))
    return out


@dataclass(frozen=True)
class TipFootprint:
    """Image-plane capsule: center (u, v) px, unit direction (du, dv), half core length and radius in px."""

    center: np.ndarray
    direction: np.ndarray
    half_core: float
    radius: float
    passing_point: np.ndarray
    angle: IncidentAngle

    def bounds(self) -> tuple[float, float, float, float]:
        """Continuous (u_min, v_min, u_max, v_max) of the capsule."""
        ext = self.half_core * np.abs(self.direction) + self.radius
        return (
            self.center[0] - ext[0],
            self.center[1] - ext[1],
            self.center[0] + ext[0],
            self.center[1] + ext[1],
        )


def tip_footprint(fan: FanGeometry, tip: TipAppearanceModel, e_ice_tip: RigidTransform) -> TipFootprint | None:
    """Projected capsule of the tip; ``None`` when the tip axis never meets the plane."""
    h = e_ice_tip.heading
    try:
        pp = passing_point(e_ice_tip.translation, h)
    except NoIntersection:
        return None
    a_entry = entry_angle(e_ice_tip)
    try:
        a_rot = rotation_angle_from_heading(e_ice_tip)
    except DegenerateProjection:
        a_rot = 0.0
    pix = world_to_pixel(fan, pp)
    rr = math.radians(a_rot)
    direction = np.array([math.sin(rr), math.cos(rr)])  # (du, dv): lateral z -> u, depth x -> v
    length = tip.length_mm * math.cos(math.radians(a_entry))
    half_core = max(length - tip.diameter_mm, 0.0) / 2.0 / fan.mm_per_px
    radius = tip.diameter_mm / 2.0 / fan.mm_per_px
    return TipFootprint(np.array([pix.u, pix.v]), direction, half_core, radius, pp, IncidentAngle.coerce(a_entry, a_rot))


def rasterize_capsule(fp: TipFootprint, shape: tuple[int, int], origin=(0, 0)) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] over a (rows, cols) grid whose top-left pixel is ``origin``.

    Pixel (i, j) is the unit square with center (origin_col + j + 0.5, origin_row + i + 0.5).
    """
    rows, cols = shape
    v = np.arange(rows, dtype=float)[:, None] + origin[0] + 0.5
    u = np.arange(cols, dtype=float)[None, :] + origin[1] + 0.5
    du = u - fp.center[0]
    dv = v - fp.center[1]
    t = np.clip(du * fp.direction[0] + dv * fp.direction[1], -fp.half_core, fp.half_core)
    dist = np.hypot(du - t * fp.direction[0], dv - t * fp.direction[1])
    return np.clip(fp.radius + 0.5 - dist, 0.0, 1.0)


def footprint_box(fp: TipFootprint, fan: FanGeometry) -> BoundingBox | None:
    u0, v0, u1, v1 = fp.bounds()
    w, h = fan.image_width, fan.image_height
    b = np.clip([u0 / w, v0 / h, u1 / w, v1 / h], 0.0, 1.0)
    if b[2] - b[0] <= 1e-9 or b[3] - b[1] <= 1e-9:
        return None
    return BoundingBox(*[float(x) for x in b])


def render_frame(
    fan: FanGeometry,
    background: BackgroundModel,
    tip: TipAppearanceModel,
    e_world_ice: RigidTransform,
    e_world_tip: RigidTransform,
    rng: np.random.Generator,
    frame_index: int = 0,
    base: np.ndarray | None = None,
) -> tuple[np.ndarray, ds.AnnotationRecord]:
    """Render one frame and its analytic annotation.

    ``base`` is the pre-rendered ``background.image(fan)``; a sequence passes
    it in so the static background is drawn once.
    """
    if base is None:
        base = background.image(fan)
    mask = fan.mask()
    img = base * (1.0 + background.frame_noise * rng.standard_normal(base.shape))
    intensity = float(np.clip(tip.peak_intensity + tip.intensity_jitter_std * rng.standard_normal(), 0.05, 1.0))

    e_ice_tip = relative_pose(e_world_ice, e_world_tip)
    fp = tip_footprint(fan, tip, e_ice_tip)
    visible = False
    box = None
    if fp is not None:
        visible = in_fan(fan, _pixel(fp.center))
        box = footprint_box(fp, fan)
        if box is None:
            visible = False
        alpha = rasterize_capsule(fp, fan.shape)
        if tip.blur_sigma_px > 0:
            alpha = ndimage.gaussian_filter(alpha, tip.blur_sigma_px)
        img = img * (1.0 - alpha) + intensity * alpha
        angle = fp.angle
    else:
        angle = IncidentAngle.coerce(entry_angle(e_ice_tip), _safe_rot(e_ice_tip))
    img = np.clip(img, 0.0, 1.0) * mask
    ann = ds.AnnotationRecord(
        frame_index=frame_index,
        visible=visible,
        angle=angle,
        box=box if visible else None,
        tip_pose=e_ice_tip,
    )
    return img, ann


def _pixel(c) -> PixelPoint:
    return PixelPoint(float(c[0]), float(c[1]))


def _safe_rot(e_ice_tip: RigidTransform) -> float:
    try:
        return rotation_angle_from_heading(e_ice_tip)
    except DegenerateProjection:
        return 0.0


# -- dataset generation ------------------------------------------------------

def fan_from_config(cfg: Config) -> FanGeometry:
    f = cfg.scene.fan
    return FanGeometry(f.angular_span, f.max_depth, f.image_width, f.image_height, f.mm_per_px)


def split_seeds(cfg: Config) -> dict[str, list[int]]:
    return {name: list(range(s.seed_start, s.seed_start + s.count)) for name, s in cfg.splits.items()}


def sequence_id(seed: int) -> str:
    return f"seq{seed:07d}"


def check_split_seeds(cfg: Config) -> dict[str, list[int]]:
    seeds = split_seeds(cfg)
    ranges = {n: (s.seed_start, s.seed_start + s.count - 1) for n, s in cfg.splits.items()}
    names = sorted(ranges)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            lo = max(ranges[a][0], ranges[b][0])
            hi = min(ranges[a][1], ranges[b][1])
            if lo <= hi:
                raise ds.SplitOverlap(
                    f"split seed ranges overlap: {a!r} {list(ranges[a])} and {b!r} {list(ranges[b])} share seeds {lo}..{hi}"
                )
    return seeds


def _pool_files(entries: list[str]) -> list[Path]:
    out = []
    for e in entries:
        p = Path(e)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")))
        elif p.is_file():
            out.append(p)
        else:
            raise FileNotFoundError(f"background pool entry not found: {p}")
    return out


def load_pools(bg: BackgroundConfig, splits) -> dict[str, list[tuple[str, Path]]]:
    """Pool images per split as (digest, path); train and test must not share any image."""
    pools = {}
    for split in splits:
        files = _pool_files(bg.pools.get(split, []))
        if not files:
            raise ValueError(f"background pool for split {split!r} is empty")
        pools[split] = [(hashlib.sha256(f.read_bytes()).hexdigest()[:16], f) for f in files]
    ds.check_disjoint({k: [d for d, _ in v] for k, v in pools.items() if k != "val"}, "background image")
    return pools


def _random_ice_pose(rng: np.random.Generator) -> RigidTransform:
    axis = rng.standard_normal(3)
    r = rotation_about(axis, rng.uniform(0, math.pi))
    return RigidTransform(r, rng.uniform(-50, 50, size=3))


def simulate_sequence(cfg: Config, seed: int, seq_seed: int, split: str, pool: list | None = None) -> tuple[list[np.ndarray], list[ds.AnnotationRecord], dict]:
    """Render one sequence; fully deterministic in (config, seed, seq_seed)."""
    m = cfg.scene.motion
    fan = fan_from_config(cfg)
    tip = TipAppearanceModel.from_config(cfg.scene.tip)
    bgc = cfg.scene.background
    rng = np.random.default_rng([seed, seq_seed])
    kind = m.kinds[int(rng.integers(len(m.kinds)))]
    speed = float(rng.uniform(*m.speed_range))
    drift = float(rng.uniform(*m.drift_range_deg_s))
    motion_seed = int(rng.integers(2**63))
    e_world_ice = _random_ice_pose(rng)
    if bgc.mode == "image_pool":
        pool_id, path = pool[int(rng.integers(len(pool)))]
        pool_img = ds.read_png(path).astype(float) / 255.0
        background = BackgroundModel("image_pool", 0, frame_noise=bgc.frame_noise, pool_id=pool_id, pool_image=pool_img)
    else:
        background = BackgroundModel("procedural_speckle", seq_seed, bgc.grain_px, bgc.mean_intensity, bgc.contrast, bgc.frame_noise)
    profile = MotionProfile(
        kind, speed, m.frame_rate_hz, m.n_frames, drift, motion_seed,
        allow_any_speed=not (10.0 <= m.speed_range[0] and m.speed_range[1] <= 20.0),
    )
    scene = TrajectoryScene.from_config(m, fan, e_world_ice)

    attempts = m.max_attempts if m.require_visible else 1
    for attempt in range(attempts):
        poses = generate_trajectory(profile, [seed, seq_seed, attempt], scene)
        rels = [relative_pose(e_world_ice, p) for p in poses]
        fps = [tip_footprint(fan, tip, r) for r in rels]
        ok = all(fp is not None and in_fan(fan, _pixel(fp.center)) and footprint_box(fp, fan) is not None for fp in fps)
        if ok or not m.require_visible:
            break
    base = background.image(fan)
    frng = np.random.default_rng([seed, seq_seed, 7])
    images, anns = [], []
    for k, pose in enumerate(poses):
        img, ann = render_frame(fan, background, tip, e_world_ice, pose, frng, frame_index=k, base=base)
        images.append(ds.to_uint8(img))
        anns.append(ann)
    meta = {
        "sequence_id": sequence_id(seq_seed),
        "split": split,
        "seed": seq_seed,
        "kind": kind,
        "speed_mm_s": speed,
        "frame_rate_hz": m.frame_rate_hz,
        "heading_drift_deg_s": drift,
        "motion_seed": motion_seed,
        "attempt": attempt,
        "background_id": background.identifier,
        "e_world_ice": e_world_ice.to_dict(),
        "e_world_tip": [p.to_dict() for p in poses],
    }
    return images, anns, meta


def _render_job(args):
    cfg_dict, seed, seq_seed, split, pool = args
    from .config import from_dict

    cfg = from_dict(cfg_dict)
    return simulate_sequence(cfg, seed, seq_seed, split, pool)


def plan_dataset(cfg: Config) -> dict[str, list[int]]:
    """Validate split bookkeeping without rendering anything."""
    cfg.validate()
    return check_split_seeds(cfg)


def generate_dataset(cfg: Config, seed: int, out: Path, jobs: int = 1, progress=None) -> dict:
    """Render every split to ``out`` and write the manifest. Returns the manifest dict.

    Sequences stream to disk one at a time; the manifest is written last by
    this (single) writer.
    """
    out = Path(out)
    seeds = plan_dataset(cfg)
    pools = load_pools(cfg.scene.background, cfg.splits) if cfg.scene.background.mode == "image_pool" else {}
    out.mkdir(parents=True, exist_ok=True)
    fan = fan_from_config(cfg)
    cfg_dict = cfg.to_dict()
    manifest = {
        "format_version": ds.FORMAT_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg_dict,
        "seed": seed,
        "image": {"width": fan.image_width, "height": fan.image_height, "dtype": "uint8"},
        "fan": fan.to_dict(),
        "n_frames": cfg.scene.motion.n_frames,
        "splits": {},
    }
    jobs_list = [(cfg_dict, seed, s, split, pools.get(split)) for split in cfg.splits for s in seeds[split]]
    entries = {split: {"sequence_ids": [], "seeds": [], "background_ids": []} for split in cfg.splits}

    def consume(result):
        images, anns, meta = result
        split = meta["split"]
        ds.write_sequence(out / split / meta["sequence_id"], images, anns, meta)
        entries[split]["sequence_ids"].append(meta["sequence_id"])
        entries[split]["seeds"].append(meta["seed"])
        entries[split]["background_ids"].append(meta["background_id"])
        if progress:
            progress(meta)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            for result in ex.map(_render_job, jobs_list, chunksize=4):
                consume(result)
    else:
        for args in jobs_list:
            consume(simulate_sequence(cfg, seed, args[2], args[3], args[4]))

    for split, spec in cfg.splits.items():
        manifest["splits"][split] = {
            "count": spec.count,
            "seed_range": [spec.seed_start, spec.seed_start + spec.count - 1],
            **entries[split],
        }
    ds.check_disjoint({k: v["background_ids"] for k, v in manifest["splits"].items() if k != "val"}, "background id")
    manifest["manifest_hash_algorithm"] = "sha256"
    ds.write_manifest(out, manifest)
    return manifest
