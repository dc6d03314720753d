"""Deterministic teacher-forced training loop, validation and checkpointing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import dataset as ds
from .config import TrainSection, config_hash
from .evaluation import TorchPredictor, metrics, rollout_many
from .model import (
    ModelConfig,
    TipTracker,
    build_model,
    load_checkpoint,
    resize_frames,
    save_checkpoint,
    tip_loss,
)

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        for k in ("train_loss", "val_loss", "val_rollout_loss"):
            v = row.get(k)
            if v is not None and not math.isfinite(v):
                raise NonFiniteLoss(f"epoch {row['epoch']}: {k} is {v}")
        self.rows.append(row)

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.rows]

    def best(self, key: str = "val_loss") -> dict:
        return min(self.rows, key=lambda r: r[key])


def set_deterministic(seed: int, on: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(on)


def _tensors(index: ds.WindowIndex, rows: np.ndarray, size: int):
    imgs, priors, targets = index.batch(rows)
    x = resize_frames(torch.from_numpy(imgs), size)
    return x, torch.from_numpy(priors), torch.from_numpy(targets)


def batch_loss(model: TipTracker, x, prior, target) -> torch.Tensor:
    b_raw, a_raw = model.forward_raw(x, prior)
    return tip_loss(b_raw, a_raw, target[:, :4], model.encode_angle_target(target[:, 4:]))


@torch.no_grad()
def evaluate_loss(model: TipTracker, index: ds.WindowIndex, batch_size: int = 64) -> float:
    """Mean teacher-forced loss over all windows of a split."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    size = model.cfg.encoder.input_size
    for start in range(0, len(index), batch_size):
        rows = np.arange(start, min(start + batch_size, len(index)))
        x, p, t = _tensors(index, rows, size)
        total += float(batch_loss(model, x, p, t)) * len(rows)
        count += len(rows)
    model.train(was)
    return total / max(count, 1)


def rollout_loss(model: TipTracker, sequences) -> float:
    """Box + angle MSE over autoregressive rollouts, where each prior is the model's previous output."""
    was = model.training
    res = rollout_many(TorchPredictor(model), sequences)
    model.train(was)
    p = np.concatenate([r.predicted for r in res])
    t = np.concatenate([r.target for r in res])
    return float(((p[:, :4] - t[:, :4]) ** 2).mean() + ((p[:, 4:] - t[:, 4:]) ** 2).mean())


def _rollout_ready(sequences, n_frames: int) -> list:
    return [s for s in sequences if len(s) >= n_frames + 1 and all(f.annotation.visible for f in s)]


def _noisy_priors(priors: torch.Tensor, box_std: float, entry_std: float, rot_std: float, rng: np.random.Generator) -> torch.Tensor:
    """Ground-truth priors plus Gaussian noise, clamped to the normalized range.

    The entry angle keeps its sign: which side of the plane the tip points to
    cannot be seen in a single frame, so the prior is its only source.
    """
    scale = np.array([box_std] * 4 + [entry_std, rot_std], dtype=np.float32)
    noise = torch.from_numpy(rng.standard_normal(priors.shape).astype(np.float32) * scale)
    out = priors + noise
    out[:, 4] = torch.sign(priors[:, 4]) * out[:, 4].abs()
    return out.clamp(-1, 1)


def mirror_states(v: torch.Tensor) -> torch.Tensor:
    """Normalized states of the left-right mirrored frame: lateral box edges swap and negate, rotation negates."""
    out = v.clone()
    out[..., 0], out[..., 2] = -v[..., 2], -v[..., 0]
    out[..., 5] = -v[..., 5]
    return out


def _mirror(x, p, t, prob, rng):
    flip = torch.from_numpy(rng.random(len(x)) < prob)
    if not flip.any():
        return x, p, t
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    sel = flip[:, None]
    return x, torch.where(sel, mirror_states(p), p), torch.where(sel, mirror_states(t), t)


def _scheduled_priors(model, index, rows, priors, prob, rng, size):
    """Replace a random subset of ground-truth priors by the model's prediction for the previous frame."""
    lookup = {(int(s), int(t)): i for i, (s, t) in enumerate(index.index)}
    swap = []
    for j, (s, t) in enumerate(index.index[rows]):
        prev = lookup.get((int(s), int(t) - 1))
        if prev is not None and rng.random() < prob:
            swap.append((j, prev))
    if not swap:
        return priors
    x, p, _ = _tensors(index, np.array([r for _, r in swap]), size)
    with torch.no_grad():
        model.eval()
        b, a = model(x, p)
        model.train()
    priors = priors.clone()
    for k, (j, _) in enumerate(swap):
        priors[j, :4] = b[k].clamp(-1, 1)
        priors[j, 4:] = a[k].clamp(-1, 1)
    return priors


def fit(
    model: TipTracker,
    train_index: ds.WindowIndex,
    val_index: ds.WindowIndex | None,
    cfg: TrainSection,
    out_dir: Path | None = None,
    cfg_hash: str = "",
    log_path: Path | None = None,
    val_sequences=None,
) -> TrainLog:
    """Train ``model`` in place. Epoch 0 in the log is the untrained model.

    Priors come from ground truth (teacher forcing) unless
    ``cfg.scheduled_sampling`` > 0. With ``val_sequences``, each epoch also logs
    ``val_rollout_loss``. When ``out_dir`` is given, ``best.ckpt`` (lowest
    ``cfg.select_by``), ``last.ckpt`` and periodic checkpoints are written.
    """
    set_deterministic(cfg.seed, cfg.deterministic)
    model.set_encoder_frozen(cfg.encoder_frozen)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs) if cfg.lr_schedule == "cosine" else None
    size = model.cfg.encoder.input_size
    tlog = TrainLog(cfg.seed, cfg_hash)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None

    def record(row):
        tlog.append(row)
        if log_file:
            log_file.write(json.dumps(row, sort_keys=True) + "\n")
            log_file.flush()
        log.info("epoch %d train %.6f val %.6f", row["epoch"], row["train_loss"], row["val_loss"])

    rollout_seqs = _rollout_ready(val_sequences or [], model.cfg.n_frames)
    if cfg.select_by == "val_rollout_loss" and not rollout_seqs:
        raise ValueError("select_by=val_rollout_loss needs validation sequences long enough for a rollout")

    def scores(row):
        if rollout_seqs:
            row["val_rollout_loss"] = rollout_loss(model, rollout_seqs)
        return row

    t_start = time.perf_counter()
    v0 = evaluate_loss(model, val_index) if val_index is not None and len(val_index) else evaluate_loss(model, train_index)
    row = scores({"epoch": 0, "train_loss": evaluate_loss(model, train_index), "val_loss": v0,
                  "wall_clock": 0.0, "seed": cfg.seed, "config_hash": cfg_hash})
    record(row)
    best = row[cfg.select_by]
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", model, seed=cfg.seed, epoch=0, extra=_extra(row, cfg_hash))
    stale = 0
    rng = np.random.default_rng(cfg.seed)
    try:
        for epoch in range(1, cfg.epochs + 1):
            model.train()
            order = rng.permutation(len(train_index))
            total, count = 0.0, 0
            for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
                rows = order[start : start + cfg.batch_size]
                x, p, t = _tensors(train_index, rows, size)
                if cfg.mirror_prob > 0:
                    x, p, t = _mirror(x, p, t, cfg.mirror_prob, rng)
                if max(cfg.prior_noise_box, cfg.prior_noise_entry, cfg.prior_noise_rot) > 0:
                    p = _noisy_priors(p, cfg.prior_noise_box, cfg.prior_noise_entry, cfg.prior_noise_rot, rng)
                if cfg.scheduled_sampling > 0:
                    p = _scheduled_priors(model, train_index, rows, p, cfg.scheduled_sampling, rng, size)
                loss = batch_loss(model, x, p, t)
                if not torch.isfinite(loss):
                    ids = [f"{train_index.sequence_ids[s]}@{f}" for s, f in train_index.index[rows]]
                    raise NonFiniteLoss(f"epoch {epoch} batch {bi}: loss {float(loss.detach())} on windows {ids}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                total += float(loss.detach()) * len(rows)
                count += len(rows)
            if sched is not None:
                sched.step()
            val = evaluate_loss(model, val_index) if val_index is not None and len(val_index) else total / count
            row = scores({"epoch": epoch, "train_loss": total / count, "val_loss": val,
                          "wall_clock": time.perf_counter() - t_start, "seed": cfg.seed, "config_hash": cfg_hash})
            record(row)
            if out_dir is not None:
                save_checkpoint(out_dir / "last.ckpt", model, seed=cfg.seed, epoch=epoch, extra=_extra(row, cfg_hash))
                if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"epoch_{epoch:04d}.ckpt", model, seed=cfg.seed, epoch=epoch, extra=_extra(row, cfg_hash))
            if row[cfg.select_by] < best:
                best, stale = row[cfg.select_by], 0
                if out_dir is not None:
                    save_checkpoint(out_dir / "best.ckpt", model, seed=cfg.seed, epoch=epoch, extra=_extra(row, cfg_hash))
            else:
                stale += 1
                if cfg.early_stop_patience and stale >= cfg.early_stop_patience:
                    log.info("early stop at epoch %d", epoch)
                    break
    finally:
        if log_file:
            log_file.close()
    return tlog


def _extra(row: dict, cfg_hash: str) -> dict:
    out = {k: row[k] for k in ("val_loss", "val_rollout_loss") if k in row}
    out["config_hash"] = cfg_hash
    return out


def train(root: str | Path, model_cfg: ModelConfig, train_cfg: TrainSection, out_dir: str | Path, full_config: dict | None = None) -> tuple[Path, TrainLog]:
    """Verify the dataset, train, and return (path of best checkpoint, log)."""
    root = Path(root)
    ds.verify_integrity(root, check_images=False)
    train_idx = ds.WindowIndex(ds.load_split(root, "train"), model_cfg.n_frames)
    val_seqs = ds.load_split(root, "val") if "val" in ds.read_manifest(root)["splits"] else []
    val_idx = ds.WindowIndex(val_seqs, model_cfg.n_frames) if val_seqs else None
    if len(train_idx) == 0:
        raise ds.DatasetError("training split has no complete window")
    tree = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "dataset": ds.read_manifest(root)["config_hash"]}
    if full_config is not None:
        tree["config"] = full_config
    h = config_hash(tree)
    model = build_model(model_cfg, train_cfg.seed)
    out_dir = Path(out_dir)
    tlog = fit(model, train_idx, val_idx, train_cfg, out_dir, h, out_dir / "train_log.jsonl", val_sequences=val_seqs)
    return out_dir / "best.ckpt", tlog


def validate(checkpoint: str | Path | TipTracker, root: str | Path, split: str, batch_size: int = 64) -> dict:
    """Teacher-forced loss and metrics on a split. Never mutates the model's parameters."""
    model = checkpoint if isinstance(checkpoint, TipTracker) else load_checkpoint(checkpoint)[0]
    seqs = ds.load_split(Path(root), split)
    idx = ds.WindowIndex(seqs, model.cfg.n_frames)
    loss = evaluate_loss(model, idx, batch_size)
    m = metrics(rollout_many(TorchPredictor(model), _rollout_ready(seqs, model.cfg.n_frames), teacher_forced=True))
    return {"loss": loss, "metrics": m.to_dict()}
