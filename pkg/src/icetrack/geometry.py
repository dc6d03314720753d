"""Rigid frames, fan-plane geometry and the analytic annotation functions.

Frame convention (ICE catheter frame):

* ``z`` -- catheter shaft,
* ``x`` -- fan centerline (imaging depth),
* ``y`` -- fan-plane normal.

The fan lies in the x-z plane. Image rows (``v``) run along depth, image
columns (``u``) along the lateral ``z`` axis, with the apex at the top-center
pixel ``(W/2, 0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])

ORTHO_TOL = 1e-9
PLANE_TOL = 1e-6


class GeometryError(ValueError):
    pass


class DegenerateProjection(GeometryError):
    """Heading is parallel to the plane normal; in-plane rotation undefined."""


class DegenerateBox(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


class OutOfPlane(GeometryError):
    pass


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: ``p_parent = rotation @ p_child + translation`` (mm)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite transform")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (3,) or (n, 3) from the child frame into the parent frame."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @property
    def heading(self) -> np.ndarray:
        """Tip heading: the frame's z-axis expressed in the parent frame."""
        return self.rotation[:, 2].copy()

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform that applies ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if np.abs(r.T @ r - np.eye(3)).max() > 1e-12:
        r = _reorthonormalize(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def relative_pose(e_world_ice: RigidTransform, e_world_tip: RigidTransform) -> RigidTransform:
    """Pose of the tip in the ICE frame, ``inv(E_world^ice) * E_world^tip``."""
    return compose(invert(e_world_ice), e_world_tip)


def rotation_about(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle_rad) * k + (1 - math.cos(angle_rad)) * (k @ k)


def frame_from_heading(heading: np.ndarray, roll_rad: float = 0.0) -> np.ndarray:
    """A rotation whose z-column is ``heading``; ``roll_rad`` spins it about that axis."""
    h = np.asarray(heading, dtype=float)
    h = h / np.linalg.norm(h)
    ref = X_AXIS if abs(h[0]) < 0.9 else Y_AXIS
    x = ref - (ref @ h) * h
    x /= np.linalg.norm(x)
    y = np.cross(h, x)
    r = np.column_stack([x, y, h])
    if roll_rad:
        r = r @ rotation_about(Z_AXIS, roll_rad)
    return r


def heading_from_angles(a_entry_deg: float, a_rot_deg: float) -> np.ndarray:
    """Unit heading with the given entry and rotation angles (inverse of the two angle ops)."""
    e = math.radians(a_entry_deg)
    r = math.radians(a_rot_deg)
    c = math.cos(e)
    return np.array([c * math.cos(r), math.sin(e), c * math.sin(r)])


def wrap_deg(a):
    """Wrap degrees into (-180, 180]."""
    w = np.mod(np.asarray(a, dtype=float) + 180.0, 360.0) - 180.0
    w = np.where(w == -180.0, 180.0, w)
    return float(w) if np.ndim(w) == 0 else w


def entry_angle(e_ice_tip: RigidTransform) -> float:
    """Signed angle (deg) between the tip heading and the fan plane.

    0 means the heading lies in the plane, +/-90 means it is along the plane
    normal. The sign is the side of the plane the heading points toward.
    """
    h = e_ice_tip.heading
    s = float(np.clip(h @ Y_AXIS, -1.0, 1.0))
    return math.degrees(math.asin(s))


def rotation_angle_from_heading(e_ice_tip: RigidTransform) -> float:
    """In-plane orientation (deg) of the projected heading, measured from the centerline."""
    h = e_ice_tip.heading
    if math.hypot(h[0], h[2]) <= 1e-9:
        raise DegenerateProjection("heading is parallel to the fan-plane normal")
    return wrap_deg(math.degrees(math.atan2(h[2], h[0])))


@dataclass(frozen=True)
class FanGeometry:
    """The 2D imaging fan and its pixel mapping.

    ``mm_per_px`` defaults to the smallest scale that fits the whole fan
    (depth and lateral extent) inside the image.
    """

    angular_span: float = 90.0
    max_depth: float = 100.0
    image_width: int = 224
    image_height: int = 224
    mm_per_px: float | None = None

    apex = np.zeros(3)
    centerline = X_AXIS
    plane_normal = Y_AXIS

    def __post_init__(self):
        if not 0.0 < self.angular_span < 180.0:
            raise GeometryError(f"angular_span must be in (0, 180), got {self.angular_span}")
        if self.max_depth <= 0:
            raise GeometryError("max_depth must be positive")
        if self.image_width < 1 or self.image_height < 1:
            raise GeometryError("image size must be positive")
        if self.mm_per_px is None:
            half = self.max_depth * math.sin(math.radians(self.angular_span / 2))
            scale = max(self.max_depth / self.image_height, 2 * half / self.image_width)
            object.__setattr__(self, "mm_per_px", scale)
        if self.mm_per_px <= 0:
            raise GeometryError("mm_per_px must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.image_height, self.image_width)

    def to_dict(self) -> dict:
        return {
            "angular_span": self.angular_span,
            "max_depth": self.max_depth,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "mm_per_px": self.mm_per_px,
        }

    def mask(self) -> np.ndarray:
        """Boolean (H, W) mask of pixel centers inside the fan."""
        v, u = np.mgrid[0 : self.image_height, 0 : self.image_width] + 0.5
        x = v * self.mm_per_px
        z = (u - self.image_width / 2) * self.mm_per_px
        depth = np.hypot(x, z)
        polar = np.degrees(np.arctan2(np.abs(z), x))
        return (depth <= self.max_depth) & (polar <= self.angular_span / 2)


@dataclass(frozen=True)
class PixelPoint:
    u: float
    v: float


def world_to_pixel(fan: FanGeometry, p: np.ndarray) -> PixelPoint:
    """Map an in-plane ICE-frame point (mm) to image pixels."""
    p = np.asarray(p, dtype=float)
    if abs(p[1]) >= PLANE_TOL:
        raise OutOfPlane(f"point is {p[1]:.3g} mm off the fan plane")
    return PixelPoint(u=fan.image_width / 2 + p[2] / fan.mm_per_px, v=p[0] / fan.mm_per_px)


def pixel_to_world(fan: FanGeometry, p: PixelPoint) -> np.ndarray:
    return np.array([p.v * fan.mm_per_px, 0.0, (p.u - fan.image_width / 2) * fan.mm_per_px])


def in_fan(fan: FanGeometry, p: PixelPoint) -> bool:
    if not (math.isfinite(p.u) and math.isfinite(p.v)):
        return False
    if not (0.0 <= p.u <= fan.image_width and 0.0 <= p.v <= fan.image_height):
        return False
    x = p.v * fan.mm_per_px
    z = (p.u - fan.image_width / 2) * fan.mm_per_px
    if math.hypot(x, z) > fan.max_depth:
        return False
    if x == 0.0 and z == 0.0:
        return True
    return math.degrees(math.atan2(abs(z), x)) <= fan.angular_span / 2


def passing_point(tip_position: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """Where the line through the tip along its heading crosses the plane y=0.

    A tip lying within 0.5 mm of the plane with a (near) in-plane heading is
    simply projected onto the plane.
    """
    p = np.asarray(tip_position, dtype=float)
    h = np.asarray(heading, dtype=float)
    hy = h[1]
    if abs(hy) > 1e-6:
        return p - (p[1] / hy) * h
    if abs(p[1]) < 0.5:
        return np.array([p[0], 0.0, p[2]])
    raise NoIntersection(f"heading is parallel to the plane and the tip is {p[1]:.3g} mm away")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized image coordinates (x along u, y along v)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        c = self.as_array()
        if not np.all(np.isfinite(c)):
            raise GeometryError("non-finite box")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"empty box {tuple(c)}")
        if c.min() < 0.0 or c.max() > 1.0:
            raise GeometryError(f"box outside [0, 1]: {tuple(c)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=float)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        a = [float(x) for x in a]
        return cls(*a)

    @classmethod
    def coerce(cls, a, eps: float = 1e-6) -> "BoundingBox":
        """Build a valid box from arbitrary (e.g. predicted) corners: sort, clip, pad."""
        a = np.clip(np.nan_to_num(np.asarray(a, dtype=float), nan=0.5), 0.0, 1.0)
        x0, x1 = sorted((a[0], a[2]))
        y0, y1 = sorted((a[1], a[3]))
        if x1 - x0 < eps:
            c = min(max((x0 + x1) / 2, eps), 1 - eps)
            x0, x1 = c - eps / 2, c + eps / 2
        if y1 - y0 < eps:
            c = min(max((y0 + y1) / 2, eps), 1 - eps)
            y0, y1 = c - eps / 2, c + eps / 2
        return cls(x0, y0, x1, y1)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)


@dataclass(frozen=True)
class IncidentAngle:
    """Entry angle in [-90, 90] and in-plane rotation in (-180, 180], degrees."""

    a_entry: float
    a_rot: float

    def __post_init__(self):
        if not (math.isfinite(self.a_entry) and math.isfinite(self.a_rot)):
            raise GeometryError("non-finite angle")
        if not -90.0 <= self.a_entry <= 90.0:
            raise GeometryError(f"a_entry out of range: {self.a_entry}")
        if not -180.0 < self.a_rot <= 180.0:
            raise GeometryError(f"a_rot out of range: {self.a_rot}")

    @classmethod
    def coerce(cls, a_entry: float, a_rot: float) -> "IncidentAngle":
        return cls(float(np.clip(a_entry, -90.0, 90.0)), wrap_deg(a_rot))

    def as_array(self) -> np.ndarray:
        return np.array([self.a_entry, self.a_rot], dtype=float)


def box_aspect_ratio(box: BoundingBox, fan: FanGeometry) -> float:
    w = box.width * fan.image_width
    h = box.height * fan.image_height
    return max(w, h) / min(w, h)


def rotation_angle_from_diagonal(
    box: BoundingBox,
    heading_hint,
    fan: FanGeometry,
    tip_diameter_mm: float = 0.0,
) -> float:
    """Rotation angle (deg) read off the box diagonal.

    ``heading_hint`` is the in-plane heading as ``(x, z)`` = (depth, lateral)
    components; it selects which of the two diagonals, and which direction
    along it, is returned. With ``tip_diameter_mm`` > 0 the box extents are
    first shrunk by the tip thickness, so the diagonal follows the tip axis
    rather than the corners of its outline.
    """
    hint = np.asarray(heading_hint, dtype=float)
    if hint.shape != (2,) or not np.any(hint):
        raise GeometryError("heading_hint must be a nonzero 2-vector")
    # extents in mm: depth (x) along image rows, lateral (z) along columns
    depth = box.height * fan.image_height * fan.mm_per_px
    lateral = box.width * fan.image_width * fan.mm_per_px
    if tip_diameter_mm > 0:
        depth = max(depth - tip_diameter_mm, 0.0)
        lateral = max(lateral - tip_diameter_mm, 0.0)
    eps = 1e-6 * fan.image_width * fan.mm_per_px
    flat_d = depth < 1e-6 * fan.image_height * fan.mm_per_px
    flat_l = lateral < eps
    if flat_d and flat_l:
        raise DegenerateBox("box has no extent in either direction")
    if flat_d:
        depth = 0.0
    if flat_l:
        lateral = 0.0
    candidates = [np.array([depth, lateral]), np.array([depth, -lateral])]
    best = max(candidates, key=lambda c: abs(c @ hint))
    if best @ hint < 0:
        best = -best
    return wrap_deg(math.degrees(math.atan2(best[1], best[0])))


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def angular_error(a: float, b: float) -> float:
    """Circular distance in degrees, in [0, 180]."""
    d = math.fmod(abs(a - b), 360.0)
    return float(min(d, 360.0 - d))
