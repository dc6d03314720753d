"""On-disk dataset format, manifests, windowing and target normalization.

Layout::

    <root>/manifest.json
    <root>/<split>/<sequence_id>/frame_00000.png     8-bit grayscale, lossless
    <root>/<split>/<sequence_id>/annotations.jsonl   one JSON record per frame
    <root>/<split>/<sequence_id>/sequence.json       motion/scene metadata

See ``docs/FORMAT.md`` for field names.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .geometry import BoundingBox, IncidentAngle, RigidTransform

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.jsonl"
SEQUENCE_META_NAME = "sequence.json"


class DatasetError(Exception):
    pass


class SplitOverlap(DatasetError):
    pass


class MissingFile(DatasetError):
    pass


class ShapeMismatch(DatasetError):
    pass


class TooShort(DatasetError):
    pass


@dataclass
class AnnotationRecord:
    frame_index: int
    visible: bool
    angle: IncidentAngle
    box: BoundingBox | None = None
    tip_pose: RigidTransform | None = None  # E_ice^tip

    def __post_init__(self):
        if not self.visible and self.box is not None:
            raise ValueError("invisible frames carry no box")
        if self.visible and self.box is None:
            raise ValueError("visible frames need a box")

    def to_dict(self) -> dict:
        return {
            "frame_index": self.frame_index,
            "visible": self.visible,
            "box": None if self.box is None else self.box.as_array().tolist(),
            "angle": self.angle.as_array().tolist(),
            "tip_pose": None if self.tip_pose is None else self.tip_pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        return cls(
            frame_index=int(d["frame_index"]),
            visible=bool(d["visible"]),
            angle=IncidentAngle(*d["angle"]),
            box=None if d.get("box") is None else BoundingBox.from_array(d["box"]),
            tip_pose=None if d.get("tip_pose") is None else RigidTransform.from_dict(d["tip_pose"]),
        )


@dataclass
class FrameRecord:
    sequence_id: str
    frame_index: int
    image_path: Path
    annotation: AnnotationRecord
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)

    def load_image(self) -> np.ndarray:
        """Float image in [0, 1], shape (H, W)."""
        if self._image is None:
            self._image = read_png(self.image_path)
        return self._image.astype(np.float32) / 255.0


@dataclass
class SequenceWindow:
    images: np.ndarray  # (N, H, W) float in [0, 1]
    prior_box: BoundingBox
    prior_angle: IncidentAngle
    target_box: BoundingBox
    target_angle: IncidentAngle
    sequence_id: str = ""
    frame_index: int = -1  # index of the target frame


@dataclass
class SplitManifest:
    name: str
    sequence_ids: list[str]
    seeds: list[int]
    background_ids: list[str]
    config_hash: str
    seed_range: tuple[int, int]

    @property
    def count(self) -> int:
        return len(self.sequence_ids)


# -- file IO -----------------------------------------------------------------

def frame_filename(k: int) -> str:
    return f"frame_{k:05d}.png"


def write_png(path: Path, image: np.ndarray) -> None:
    """Write a float [0, 1] or uint8 image as 8-bit grayscale PNG."""
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Image.fromarray(image, mode="L").save(path, format="PNG", optimize=False)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise MissingFile(f"missing image file: {path}") from None


def write_sequence(seq_dir: Path, images: Sequence[np.ndarray], annotations: Sequence[AnnotationRecord], meta: dict) -> None:
    seq_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for img, ann in zip(images, annotations):
        name = frame_filename(ann.frame_index)
        write_png(seq_dir / name, img)
        rec = ann.to_dict()
        rec["image"] = name
        lines.append(json.dumps(rec, sort_keys=True))
    (seq_dir / ANNOTATIONS_NAME).write_text("\n".join(lines) + "\n")
    (seq_dir / SEQUENCE_META_NAME).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def write_manifest(root: Path, manifest: dict) -> str:
    text = json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    (root / MANIFEST_NAME).write_text(text)
    return manifest_hash(root)


def manifest_hash(root: Path) -> str:
    return hashlib.sha256((Path(root) / MANIFEST_NAME).read_bytes()).hexdigest()


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFile(f"missing manifest: {path}") from None


def load_sequence(root: Path, split: str, sequence_id: str) -> list[FrameRecord]:
    seq_dir = Path(root) / split / sequence_id
    return load_sequence_dir(seq_dir, sequence_id)


def load_sequence_dir(seq_dir: Path, sequence_id: str | None = None) -> list[FrameRecord]:
    seq_dir = Path(seq_dir)
    sequence_id = sequence_id or seq_dir.name
    ann_path = seq_dir / ANNOTATIONS_NAME
    try:
        text = ann_path.read_text()
    except FileNotFoundError:
        raise MissingFile(f"missing annotations: {ann_path}") from None
    frames = []
    for line in text.splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        frames.append(
            FrameRecord(sequence_id, int(d["frame_index"]), seq_dir / d["image"], AnnotationRecord.from_dict(d))
        )
    return frames


def load_split(root: Path, split: str) -> list[list[FrameRecord]]:
    m = read_manifest(root)
    if split not in m["splits"]:
        raise DatasetError(f"split {split!r} not in dataset (have {sorted(m['splits'])})")
    return [load_sequence(root, split, sid) for sid in m["splits"][split]["sequence_ids"]]


# -- manifest verification ---------------------------------------------------

def load_manifest(root: Path) -> dict[str, SplitManifest]:
    m = read_manifest(root)
    out = {}
    for name, s in m["splits"].items():
        out[name] = SplitManifest(
            name=name,
            sequence_ids=list(s["sequence_ids"]),
            seeds=list(s["seeds"]),
            background_ids=list(s["background_ids"]),
            config_hash=m["config_hash"],
            seed_range=tuple(s["seed_range"]),
        )
    return out


def check_disjoint(splits: dict[str, Iterable], what: str) -> None:
    """Raise SplitOverlap naming the first shared entry between any two splits."""
    names = sorted(splits)
    sets = {n: set(splits[n]) for n in names}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            common = sets[a] & sets[b]
            if common:
                ex = sorted(common, key=str)[0]
                raise SplitOverlap(f"{what} {ex!r} appears in both {a!r} and {b!r} ({len(common)} shared)")


def verify_integrity(root: Path, check_images: bool = True) -> dict[str, SplitManifest]:
    """Check counts, split disjointness, file presence and image shape. Read-only."""
    root = Path(root)
    raw = read_manifest(root)
    splits = load_manifest(root)
    for name, s in splits.items():
        declared = raw["splits"][name]["count"]
        if declared != s.count or len(s.seeds) != s.count:
            raise DatasetError(f"split {name!r}: declared count {declared} but {s.count} sequence ids")
        if len(set(s.sequence_ids)) != s.count:
            raise SplitOverlap(f"split {name!r} lists a sequence id twice")
    check_disjoint({n: s.sequence_ids for n, s in splits.items()}, "sequence id")
    check_disjoint({n: s.seeds for n, s in splits.items()}, "seed")
    bg = {n: s.background_ids for n, s in splits.items() if n != "val"}
    check_disjoint(bg, "background id")
    h, w = raw["image"]["height"], raw["image"]["width"]
    for name, s in splits.items():
        for sid in s.sequence_ids:
            seq_dir = root / name / sid
            if not seq_dir.is_dir():
                raise MissingFile(f"missing sequence directory: {seq_dir}")
            frames = load_sequence_dir(seq_dir, sid)
            prev = -1
            for fr in frames:
                if fr.frame_index <= prev:
                    raise DatasetError(f"{seq_dir}: frame indices not strictly increasing at {fr.frame_index}")
                prev = fr.frame_index
                if not fr.image_path.is_file():
                    raise MissingFile(f"missing image file: {fr.image_path}")
                if check_images:
                    with Image.open(fr.image_path) as im:
                        size = im.size
                    if size != (w, h):
                        raise ShapeMismatch(f"{fr.image_path}: image is {size[0]}x{size[1]}, manifest says {w}x{h}")
    return splits


# -- windowing and normalization ---------------------------------------------

def window_starts(visible: Sequence[bool], n: int) -> list[int]:
    """Start indices of stride-1 windows of length n whose frames are all visible."""
    good = []
    for s in range(len(visible) - n + 1):
        if all(visible[s : s + n]):
            good.append(s)
    return good


def window(sequence: Sequence[FrameRecord], n: int, load_images: bool = True) -> list[SequenceWindow]:
    """Sliding windows of n frames; the prior is frame n-1's state, the target frame n's."""
    if n < 2:
        raise ValueError("window length must be >= 2")
    if len(sequence) < n:
        raise TooShort(f"sequence of {len(sequence)} frames is shorter than the window length {n}")
    ids = {fr.sequence_id for fr in sequence}
    if len(ids) > 1:
        raise ValueError(f"frames from several sequences: {sorted(ids)}")
    visible = [fr.annotation.visible for fr in sequence]
    out = []
    images = None
    if load_images:
        images = [fr.load_image() if fr.annotation.visible else None for fr in sequence]
    for s in window_starts(visible, n):
        prior = sequence[s + n - 2].annotation
        target = sequence[s + n - 1].annotation
        stack = np.stack(images[s : s + n]) if images is not None else np.empty((0,))
        out.append(
            SequenceWindow(
                images=stack,
                prior_box=prior.box,
                prior_angle=prior.angle,
                target_box=target.box,
                target_angle=target.angle,
                sequence_id=sequence[0].sequence_id,
                frame_index=sequence[s + n - 1].frame_index,
            )
        )
    return out


def normalize(box: BoundingBox, angle: IncidentAngle) -> np.ndarray:
    """(box, angle) -> 6-vector in [-1, 1]: corners via 2x-1, entry/90, rotation/180."""
    b = box.as_array() * 2.0 - 1.0
    return np.concatenate([b, [angle.a_entry / 90.0, angle.a_rot / 180.0]])


def denormalize(vec) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`normalize`, returning raw arrays (box corners, [entry, rot])."""
    v = np.asarray(vec, dtype=float)
    return (v[:4] + 1.0) / 2.0, np.array([v[4] * 90.0, v[5] * 180.0])


def denormalize_record(vec) -> tuple[BoundingBox, IncidentAngle]:
    """Denormalize possibly out-of-range (predicted) vectors into valid records."""
    box, ang = denormalize(vec)
    return BoundingBox.coerce(box), IncidentAngle.coerce(ang[0], ang[1])


def state_vector(ann: AnnotationRecord) -> np.ndarray:
    return normalize(ann.box, ann.angle)


class WindowIndex:
    """All visible windows of a split, with frames held once per sequence as uint8.

    ``frames[s]`` is an (L, H, W) uint8 array, ``states[s]`` the (L, 6)
    normalized states, and ``index`` rows are ``(sequence, target_frame)``.
    """

    def __init__(self, sequences: list[list[FrameRecord]], n: int):
        self.n = n
        self.sequence_ids = [seq[0].sequence_id for seq in sequences]
        self.frames: list[np.ndarray] = []
        self.states: list[np.ndarray] = []
        index = []
        for si, seq in enumerate(sequences):
            vis = [fr.annotation.visible for fr in seq]
            starts = window_starts(vis, n)
            imgs = []
            for fr in seq:
                imgs.append(read_png(fr.image_path) if fr.annotation.visible else None)
            shape = next(i.shape for i in imgs if i is not None) if any(v for v in vis) else (1, 1)
            arr = np.stack([i if i is not None else np.zeros(shape, np.uint8) for i in imgs])
            st = np.stack([state_vector(fr.annotation) if fr.annotation.visible else np.zeros(6) for fr in seq])
            self.frames.append(arr)
            self.states.append(st.astype(np.float32))
            index.extend((si, s + n - 1) for s in starts)
        self.index = np.array(index, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Images (B, N, H, W) float32, priors (B, 6), targets (B, 6)."""
        imgs, priors, targets = [], [], []
        for si, t in self.index[rows]:
            imgs.append(self.frames[si][t - self.n + 1 : t + 1])
            priors.append(self.states[si][t - 1])
            targets.append(self.states[si][t])
        return (
            np.stack(imgs).astype(np.float32) / 255.0,
            np.stack(priors),
            np.stack(targets),
        )

