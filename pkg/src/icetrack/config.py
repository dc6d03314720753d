"""Declarative configuration tree.

One YAML document with the sections ``scene``, ``splits``, ``model``,
``train`` and ``eval``. Missing keys take the defaults below; unknown keys are
rejected. The config hash is SHA-256 over the canonical JSON serialization
(sorted keys, no whitespace) of the fully resolved tree.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

CONFIG_ENV = "ICETRACK_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class FanConfig:
    angular_span: float = 90.0
    max_depth: float = 100.0
    image_width: int = 224
    image_height: int = 224
    mm_per_px: float | None = None


@dataclass
class TipConfig:
    length_mm: float = 10.0
    diameter_mm: float = 3.0
    peak_intensity: float = 0.9
    intensity_jitter_std: float = 0.05
    blur_sigma_px: float = 0.7


@dataclass
class BackgroundConfig:
    mode: str = "procedural_speckle"
    grain_px: float = 1.5
    mean_intensity: float = 0.25
    contrast: float = 0.5
    frame_noise: float = 0.03
    # image_pool mode: split name -> list of image files or directories
    pools: dict[str, list[str]] = field(default_factory=dict)


@dataclass
class MotionConfig:
    kinds: list[str] = field(default_factory=lambda: ["insertion", "withdrawal", "mixed"])
    speed_range: list[float] = field(default_factory=lambda: [10.0, 20.0])
    frame_rate_hz: float = 25.0
    n_frames: int = 20
    drift_range_deg_s: list[float] = field(default_factory=lambda: [20.0, 60.0])
    entry_range_deg: list[float] = field(default_factory=lambda: [15.0, 70.0])
    rot_range_deg: float = 150.0
    depth_range: list[float] = field(default_factory=lambda: [0.3, 0.8])
    polar_fraction: float = 0.7
    require_visible: bool = True
    max_attempts: int = 50


@dataclass
class SceneConfig:
    fan: FanConfig = field(default_factory=FanConfig)
    tip: TipConfig = field(default_factory=TipConfig)
    background: BackgroundConfig = field(default_factory=BackgroundConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)


@dataclass
class SplitSpec:
    count: int = 1
    seed_start: int = 0


def _default_splits() -> dict[str, SplitSpec]:
    return {
        "train": SplitSpec(200, 0),
        "val": SplitSpec(16, 100_000),
        "test": SplitSpec(24, 200_000),
    }


@dataclass
class ModelSection:
    n_frames: int = 5
    input_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    encoder_channels: int = 16
    n_layers: int = 8
    n_heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    head_hidden: int = 0
    tokens_per_frame: str = "pooled"
    cls_positional: bool = False
    angle_target: str = "raw"


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 6
    lr: float = 1e-4
    # "constant" or "cosine" (per-epoch decay to zero over the run)
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    seed: int = 0
    encoder_frozen: bool = False
    checkpoint_every: int = 0
    # best.ckpt criterion: "val_loss" (teacher forced) or "val_rollout_loss" (autoregressive)
    select_by: str = "val_loss"
    early_stop_patience: int = 0
    grad_clip: float = 1.0
    scheduled_sampling: float = 0.0
    # std of Gaussian noise added to ground-truth priors (normalized units)
    prior_noise_box: float = 0.0
    prior_noise_entry: float = 0.0
    prior_noise_rot: float = 0.0
    # probability of mirroring a training window left-right
    mirror_prob: float = 0.0
    deterministic: bool = True


@dataclass
class EvalSection:
    bootstrap: str = "ground_truth_first"
    n_overlays: int = 4


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    splits: dict[str, SplitSpec] = field(default_factory=_default_splits)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> "Config":
        m = self.scene.motion
        if not m.kinds or any(k not in ("insertion", "withdrawal", "mixed") for k in m.kinds):
            raise ConfigError(f"scene.motion.kinds: unknown kind in {m.kinds}")
        lo, hi = m.speed_range
        if not 0 < lo <= hi:
            raise ConfigError("scene.motion.speed_range must be increasing and positive")
        if m.frame_rate_hz <= 0:
            raise ConfigError("scene.motion.frame_rate_hz must be positive")
        if m.n_frames < self.model.n_frames + 1:
            raise ConfigError(
                f"scene.motion.n_frames={m.n_frames} leaves no window for model.n_frames={self.model.n_frames}"
            )
        e0, e1 = m.entry_range_deg
        if not 0 <= e0 <= e1 < 90:
            raise ConfigError("scene.motion.entry_range_deg must satisfy 0 <= lo <= hi < 90")
        if not 0 < m.depth_range[0] < m.depth_range[1] <= 1:
            raise ConfigError("scene.motion.depth_range must lie in (0, 1]")
        t = self.scene.tip
        if not t.length_mm > t.diameter_mm > 0:
            raise ConfigError("scene.tip: need length_mm > diameter_mm > 0")
        if not 0 < t.peak_intensity <= 1:
            raise ConfigError("scene.tip.peak_intensity must be in (0, 1]")
        if t.intensity_jitter_std < 0 or t.blur_sigma_px < 0:
            raise ConfigError("scene.tip: jitter and blur must be non-negative")
        b = self.scene.background
        if b.mode not in ("procedural_speckle", "image_pool"):
            raise ConfigError(f"scene.background.mode: unknown mode {b.mode!r}")
        if b.mode == "image_pool":
            for split in self.splits:
                if not b.pools.get(split):
                    raise ConfigError(f"scene.background.pools.{split} must be a nonempty pool")
        if not self.splits:
            raise ConfigError("splits: at least one split is required")
        for name, s in self.splits.items():
            if s.count < 1:
                raise ConfigError(f"splits.{name}.count must be >= 1")
        mc = self.model
        if mc.n_frames < 2:
            raise ConfigError("model.n_frames must be >= 2")
        if mc.input_size % mc.patch_size:
            raise ConfigError("model.input_size must be divisible by model.patch_size")
        if mc.embed_dim < 8 or mc.embed_dim % 2:
            raise ConfigError("model.embed_dim must be even and >= 8")
        if mc.embed_dim % mc.n_heads:
            raise ConfigError("model.embed_dim must be divisible by model.n_heads")
        if mc.tokens_per_frame not in ("pooled", "patch"):
            raise ConfigError("model.tokens_per_frame must be 'pooled' or 'patch'")
        if mc.angle_target not in ("raw", "sincos"):
            raise ConfigError("model.angle_target must be 'raw' or 'sincos'")
        tc = self.train
        if tc.epochs < 1 or tc.batch_size < 1 or tc.lr <= 0:
            raise ConfigError("train: need epochs >= 1, batch_size >= 1, lr > 0")
        if min(tc.prior_noise_box, tc.prior_noise_entry, tc.prior_noise_rot) < 0:
            raise ConfigError("train.prior_noise_* must be non-negative")
        if tc.select_by not in ("val_loss", "val_rollout_loss"):
            raise ConfigError(f"train.select_by must be 'val_loss' or 'val_rollout_loss', got {tc.select_by!r}")
        if tc.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"train.lr_schedule must be 'constant' or 'cosine', got {tc.lr_schedule!r}")
        if not 0 <= tc.mirror_prob <= 1:
            raise ConfigError("train.mirror_prob must be in [0, 1]")
        if not 0 <= tc.scheduled_sampling <= 1:
            raise ConfigError("train.scheduled_sampling must be a probability")
        if self.eval.bootstrap not in ("ground_truth_first", "zeros"):
            raise ConfigError("eval.bootstrap must be 'ground_truth_first' or 'zeros'")
        return self


def config_hash(tree: Any) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        ftype = fields[name].type
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif cls is Config and name == "splits":
            if not isinstance(value, dict):
                raise ConfigError("splits: expected a mapping of split name -> {count, seed_start}")
            kwargs[name] = {k: _build(SplitSpec, v, f"splits.{k}") for k, v in value.items()}
        else:
            kwargs[name] = _coerce(value, default if default is not None else fields[name].default, sub, ftype)
    return cls(**kwargs)


def _coerce(value, default, path, ftype):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        if default and isinstance(default[0], float):
            return [float(v) for v in value]
        return list(value)
    if isinstance(default, float) or "float" in str(ftype):
        if value is None and "None" in str(ftype):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return copy.deepcopy(value)


def from_dict(data: dict | None) -> Config:
    return _build(Config, data or {}, "").validate()


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides (values parsed as YAML scalars)."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from None
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a mapping")
        node[parts[-1]] = value
    return data


def load_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> Config:
    """Load a config file (or ``$ICETRACK_CONFIG``, or pure defaults) and apply overrides."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
    if overrides:
        data = apply_overrides(data, overrides)
    return from_dict(data)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
