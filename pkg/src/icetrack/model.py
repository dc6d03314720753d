"""Sequence regression network and its loss.

Tokens entering the transformer, in order::

    [CLS, frame_1 ... frame_N (T tokens each), prior_box, prior_angle]

The CLS output feeds two separate affine heads: box corners (4) and incident
angles (2). Everything works in normalized units (see ``dataset.normalize``).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "icetrack-checkpoint"
CHECKPOINT_VERSION = "1.0"


class ShapeMismatch(ValueError):
    pass


class NonFiniteParameters(RuntimeError):
    pass


class CheckpointVersionMismatch(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    input_size: int = 224
    patch_size: int = 16
    embed_dim: int = 384
    channels: int = 16  # conv stem width

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if self.embed_dim < 8 or self.embed_dim % 2:
            raise ValueError("embed_dim must be even and >= 8")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size


@dataclass
class ModelConfig:
    n_frames: int = 5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    n_layers: int = 8
    n_heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.0
    head_hidden: int = 0
    tokens_per_frame: str = "pooled"
    cls_positional: bool = False
    angle_target: str = "raw"  # "sincos" is an extension: rotation regressed as (sin, cos)

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.encoder.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.tokens_per_frame not in ("pooled", "patch"):
            raise ValueError(f"unknown tokens_per_frame {self.tokens_per_frame!r}")
        if self.angle_target not in ("raw", "sincos"):
            raise ValueError(f"unknown angle_target {self.angle_target!r}")

    @property
    def d(self) -> int:
        return self.encoder.embed_dim

    @property
    def tokens_per_frame_count(self) -> int:
        return 1 if self.tokens_per_frame == "pooled" else self.encoder.grid ** 2

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_frames * self.tokens_per_frame_count + 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)

    @classmethod
    def from_section(cls, m) -> "ModelConfig":
        enc = EncoderConfig(m.input_size, m.patch_size, m.embed_dim, m.encoder_channels)
        return cls(
            n_frames=m.n_frames,
            encoder=enc,
            n_layers=m.n_layers,
            n_heads=m.n_heads,
            mlp_ratio=m.mlp_ratio,
            dropout=m.dropout,
            head_hidden=m.head_hidden,
            tokens_per_frame=m.tokens_per_frame,
            cls_positional=m.cls_positional,
            angle_target=m.angle_target,
        )


class PatchEncoder(nn.Module):
    """Small trainable stand-in for the pretrained ultrasound image encoder.

    Strided convs reduce each frame to a patch grid. In ``pooled`` mode the
    whole patch grid is flattened and projected to one d-dim token, so the
    token keeps where in the image things are; in ``patch`` mode every patch
    becomes a token.
    """

    def __init__(self, cfg: EncoderConfig, pooled: bool = True):
        super().__init__()
        self.cfg = cfg
        self.pooled = pooled
        c = cfg.channels
        p = cfg.patch_size
        layers: list[nn.Module] = []
        if p > 1 and p & (p - 1) == 0:
            # power-of-two patch: stack of stride-2 3x3 convs
            cin = 1
            for i in range(p.bit_length() - 1):
                cout = c if i == 0 else 2 * c
                layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GELU()]
                cin = cout
        else:
            layers = [nn.Conv2d(1, c, kernel_size=p, stride=p), nn.GELU()]
            cin = c
        self.stem = nn.Sequential(*layers)
        if pooled:
            self.proj = nn.Linear(cin * cfg.grid**2, cfg.embed_dim)
        else:
            self.proj = nn.Linear(cin, cfg.embed_dim)
            self.patch_pos = nn.Parameter(torch.zeros(cfg.grid**2, cfg.embed_dim))
            nn.init.normal_(self.patch_pos, std=0.02)
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, N, H, W) -> (B, N, T, d)."""
        if images.dim() != 4:
            raise ShapeMismatch(f"expected (B, N, H, W) images, got shape {tuple(images.shape)}")
        b, n, h, w = images.shape
        s = self.cfg.input_size
        if (h, w) != (s, s):
            raise ShapeMismatch(f"encoder expects {s}x{s} frames, got {h}x{w}")
        x = self.stem(images.reshape(b * n, 1, h, w))
        if self.pooled:
            x = self.proj(x.flatten(1)).unsqueeze(1)
        else:
            x = self.proj(x.flatten(2).transpose(1, 2)) + self.patch_pos
        x = self.norm(x)
        return x.reshape(b, n, x.shape[1], x.shape[2])


class PriorEmbedding(nn.Module):
    """Affine maps of the prior box (4 -> d) and prior angles (2 -> d)."""

    def __init__(self, d: int):
        super().__init__()
        self.box = nn.Linear(4, d)
        self.angle = nn.Linear(2, d)

    def forward(self, prior_box: torch.Tensor, prior_angle: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.box(prior_box), self.angle(prior_angle)], dim=1)


def _head(d: int, hidden: int, out: int) -> nn.Module:
    if hidden <= 0:
        return nn.Linear(d, out)
    return nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, out))


class TipTracker(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.encoder = PatchEncoder(cfg.encoder, pooled=cfg.tokens_per_frame == "pooled")
        self.prior = PriorEmbedding(d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        n_pos = cfg.n_tokens if cfg.cls_positional else cfg.n_tokens - 1
        self.pos = nn.Parameter(torch.zeros(1, n_pos, d))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=cfg.n_heads,
            dim_feedforward=int(d * cfg.mlp_ratio),
            dropout=cfg.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, cfg.n_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.box_head = _head(d, cfg.head_hidden, 4)
        self.angle_head = _head(d, cfg.head_hidden, 3 if cfg.angle_target == "sincos" else 2)

    def set_encoder_frozen(self, frozen: bool) -> None:
        for p in self.encoder.parameters():
            p.requires_grad_(not frozen)

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def embed_prior(self, prior_box: torch.Tensor, prior_angle: torch.Tensor) -> torch.Tensor:
        return self.prior(prior_box, prior_angle)

    def tokens(self, images: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
        """Token sequence with positional encodings added, (B, n_tokens, d)."""
        if prior.dim() != 2 or prior.shape[1] != 6:
            raise ShapeMismatch(f"prior must be (B, 6), got {tuple(prior.shape)}")
        if images.dim() != 4 or images.shape[1] != self.cfg.n_frames:
            raise ShapeMismatch(f"expected {self.cfg.n_frames} frames per window, got shape {tuple(images.shape)}")
        if images.shape[0] != prior.shape[0]:
            raise ShapeMismatch("images and prior have different batch sizes")
        b = images.shape[0]
        f = self.encode_images(images).flatten(1, 2)
        p = self.embed_prior(prior[:, :4], prior[:, 4:])
        body = torch.cat([f, p], dim=1)
        cls = self.cls_token.expand(b, -1, -1)
        if self.cfg.cls_positional:
            return torch.cat([cls, body], dim=1) + self.pos
        return torch.cat([cls, body + self.pos], dim=1)

    def readout(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Transformer over embedded tokens; returns raw (box, angle) head outputs."""
        z = self.norm(self.transformer(tokens)[:, 0])
        return self.box_head(z), self.angle_head(z)

    def forward_raw(self, images: torch.Tensor, prior: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.readout(self.tokens(images, prior))

    def forward(self, images: torch.Tensor, prior: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict (B_hat (B, 4), A_hat (B, 2)) in normalized units."""
        if not self.training:
            check_finite(self)
        box, ang = self.forward_raw(images, prior)
        return box, self.decode_angle(ang)

    def decode_angle(self, raw: torch.Tensor) -> torch.Tensor:
        if self.cfg.angle_target == "raw":
            return raw
        rot = torch.atan2(raw[:, 1], raw[:, 2]) / math.pi
        return torch.stack([raw[:, 0], rot], dim=1)

    def encode_angle_target(self, angle: torch.Tensor) -> torch.Tensor:
        """Map normalized (entry, rot) targets into the angle head's output space."""
        if self.cfg.angle_target == "raw":
            return angle
        r = angle[:, 1] * math.pi
        return torch.stack([angle[:, 0], torch.sin(r), torch.cos(r)], dim=1)


def check_finite(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteParameters(f"parameter {name} has non-finite values")


def tip_loss(b_hat: torch.Tensor, a_hat: torch.Tensor, b: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """Unweighted sum of the box MSE and the angle MSE."""
    return F.mse_loss(b_hat, b) + F.mse_loss(a_hat, a)


def build_model(cfg: ModelConfig, seed: int = 0) -> TipTracker:
    torch.manual_seed(seed)
    return TipTracker(cfg)


def resize_frames(images: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of (B, N, H, W) frames to size x size."""
    b, n, h, w = images.shape
    if (h, w) == (size, size):
        return images
    x = F.interpolate(images.reshape(b * n, 1, h, w), size=(size, size), mode="bilinear", align_corners=False)
    return x.reshape(b, n, size, size)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | Path, model: TipTracker, *, seed: int, epoch: int, extra: dict | None = None) -> None:
    """Write a self-describing checkpoint: format tag, version, config, tensors, seed, epoch."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "seed": int(seed),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[TipTracker, dict]:
    """Load a checkpoint; accepts any minor version of the current major version."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionMismatch(f"{path} is not an icetrack checkpoint")
    major = str(blob.get("format_version", "0")).split(".")[0]
    if major != CHECKPOINT_VERSION.split(".")[0]:
        raise CheckpointVersionMismatch(
            f"{path}: checkpoint format {blob.get('format_version')} is incompatible with {CHECKPOINT_VERSION}"
        )
    model = TipTracker(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return model, meta
