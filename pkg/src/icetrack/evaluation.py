"""Autoregressive rollout, metrics, throughput benchmark and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from . import dataset as ds
from .geometry import BoundingBox, FanGeometry, angular_error, iou
from .model import TipTracker, resize_frames

REPORT_SCHEMA_VERSION = 1
BOOTSTRAP_MODES = ("ground_truth_first", "zeros")


class EvaluationError(Exception):
    pass


class EmptyInput(EvaluationError):
    pass


class IOFailure(EvaluationError):
    pass


class Predictor(Protocol):
    n_frames: int

    def predict_batch(self, images: np.ndarray, priors: np.ndarray) -> np.ndarray:
        """(B, N, H, W) float frames and (B, 6) normalized priors -> (B, 6) normalized states."""


class TorchPredictor:
    """Wraps a TipTracker; frames are resized to the encoder input size."""

    def __init__(self, model: TipTracker):
        self.model = model.eval()
        self.n_frames = model.cfg.n_frames
        self.size = model.cfg.encoder.input_size

    @torch.no_grad()
    def predict_batch(self, images: np.ndarray, priors: np.ndarray) -> np.ndarray:
        x = resize_frames(torch.as_tensor(np.asarray(images, dtype=np.float32)), self.size)
        p = torch.as_tensor(np.asarray(priors, dtype=np.float32))
        box, ang = self.model(x, p)
        return torch.cat([box, ang], dim=1).double().numpy()


class PriorCopyPredictor:
    """Outputs its prior unchanged: the floor any tracker must beat."""

    def __init__(self, n_frames: int = 5):
        self.n_frames = n_frames

    def predict_batch(self, images, priors):
        return np.array(priors, dtype=float, copy=True)


def _frame_key(image: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


class OraclePredictor:
    """Test double that looks the current frame up and returns its ground-truth state."""

    def __init__(self, sequences: Sequence[Sequence[ds.FrameRecord]], n_frames: int = 5):
        self.n_frames = n_frames
        self.table = {}
        for seq in sequences:
            for fr in seq:
                if fr.annotation.visible:
                    self.table[_frame_key(fr.load_image())] = ds.state_vector(fr.annotation)

    def predict_batch(self, images, priors):
        return np.stack([self.table[_frame_key(w[-1])] for w in images])


@dataclass
class RolloutResult:
    sequence_id: str
    frame_indices: list[int]
    predicted: np.ndarray  # (T, 6) normalized
    target: np.ndarray  # (T, 6) normalized
    bootstrap: str
    image_paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float).reshape(-1, 6)
        self.target = np.asarray(self.target, dtype=float).reshape(-1, 6)


def _check_rollout_input(sequence, n):
    if len(sequence) < n + 1:
        raise ds.TooShort(f"sequence of {len(sequence)} frames needs at least {n + 1} for a rollout with N={n}")
    missing = [fr.frame_index for fr in sequence if not fr.annotation.visible]
    if missing:
        raise ds.DatasetError(f"sequence {sequence[0].sequence_id}: rollout needs visible frames, {missing} are not")


def rollout(predictor: Predictor, sequence: Sequence[ds.FrameRecord], bootstrap: str = "ground_truth_first", teacher_forced: bool = False) -> RolloutResult:
    """Predict every frame from index N-1 on, feeding back the model's own previous output.

    Only the bootstrap prior (frame N-2) may come from ground truth. With
    ``teacher_forced`` every prior is ground truth instead (diagnostic only).
    """
    return rollout_many(predictor, [sequence], bootstrap, teacher_forced)[0]


def rollout_many(
    predictor: Predictor,
    sequences: Sequence[Sequence[ds.FrameRecord]],
    bootstrap: str = "ground_truth_first",
    teacher_forced: bool = False,
) -> list[RolloutResult]:
    """Lock-step rollout of several sequences, batching the same time step across them."""
    if bootstrap not in BOOTSTRAP_MODES:
        raise ValueError(f"unknown bootstrap mode {bootstrap!r}")
    n = predictor.n_frames
    for seq in sequences:
        _check_rollout_input(seq, n)
    images = [np.stack([fr.load_image() for fr in seq]) for seq in sequences]
    preds: list[list[np.ndarray]] = [[] for _ in sequences]
    longest = max(len(s) for s in sequences)
    for t in range(n - 1, longest):
        active = [i for i, s in enumerate(sequences) if t < len(s)]
        windows = np.stack([images[i][t - n + 1 : t + 1] for i in active])
        priors = []
        for i in active:
            if t == n - 1 or teacher_forced:
                if bootstrap == "zeros" and not teacher_forced:
                    priors.append(np.zeros(6))
                else:
                    priors.append(ds.state_vector(sequences[i][t - 1].annotation))
            else:
                priors.append(preds[i][-1])
        out = predictor.predict_batch(windows, np.stack(priors))
        for j, i in enumerate(active):
            preds[i].append(np.asarray(out[j], dtype=float))
    results = []
    for i, seq in enumerate(sequences):
        frames = seq[n - 1 :]
        results.append(
            RolloutResult(
                sequence_id=seq[0].sequence_id,
                frame_indices=[fr.frame_index for fr in frames],
                predicted=np.stack(preds[i]),
                target=np.stack([ds.state_vector(fr.annotation) for fr in frames]),
                bootstrap="teacher_forced" if teacher_forced else bootstrap,
                image_paths=[str(fr.image_path) for fr in frames],
            )
        )
    return results


@dataclass
class FrameErrors:
    entry: np.ndarray
    rot: np.ndarray
    iou: np.ndarray


def frame_errors(result: RolloutResult) -> FrameErrors:
    ent, rot, ious = [], [], []
    for p, t in zip(result.predicted, result.target):
        pb, pa = ds.denormalize_record(p)
        tb, ta = ds.denormalize_record(t)
        ent.append(angular_error(pa.a_entry, ta.a_entry))
        rot.append(angular_error(pa.a_rot, ta.a_rot))
        ious.append(iou(pb, tb))
    return FrameErrors(np.array(ent), np.array(rot), np.array(ious))


@dataclass
class SequenceMetrics:
    sequence_id: str
    n_frames: int
    entry_err_mean: float
    rot_err_mean: float
    iou_mean: float


@dataclass
class MetricsReport:
    entry_err_mean: float
    entry_err_std: float
    rot_err_mean: float
    rot_err_std: float
    iou_mean: float
    iou_std: float
    n_frames: int
    n_sequences: int
    per_sequence: list[SequenceMetrics]
    throughput_hz: float | None = None
    config_hash: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_sequence"] = [SequenceMetrics(**s) for s in d["per_sequence"]]
        return cls(**d)


def metrics(results: Sequence[RolloutResult], config_hash: str | None = None, throughput_hz: float | None = None) -> MetricsReport:
    """Pool per-frame errors over all sequences (population std), plus a per-sequence breakdown."""
    if not results:
        raise EmptyInput("no rollout results to aggregate")
    per_seq = []
    ent, rot, ious = [], [], []
    for r in results:
        e = frame_errors(r)
        if len(e.iou) == 0:
            continue
        ent.append(e.entry)
        rot.append(e.rot)
        ious.append(e.iou)
        per_seq.append(SequenceMetrics(r.sequence_id, len(e.iou), float(e.entry.mean()), float(e.rot.mean()), float(e.iou.mean())))
    if not ent:
        raise EmptyInput("rollout results contain no frames")
    ent, rot, ious = np.concatenate(ent), np.concatenate(rot), np.concatenate(ious)
    per_seq.sort(key=lambda s: s.sequence_id)
    return MetricsReport(
        entry_err_mean=float(ent.mean()),
        entry_err_std=float(ent.std()),
        rot_err_mean=float(rot.mean()),
        rot_err_std=float(rot.std()),
        iou_mean=float(ious.mean()),
        iou_std=float(ious.std()),
        n_frames=int(len(ious)),
        n_sequences=len(per_seq),
        per_sequence=per_seq,
        throughput_hz=throughput_hz,
        config_hash=config_hash,
    )


def throughput(model: TipTracker, fan: FanGeometry, n_warmup: int = 10, n_iters: int = 100, seed: int = 0) -> dict:
    """Steady-state single-window latency on fixed random frames of the fan's size.

    ``hz`` is ``n_iters / total_time`` over the timed iterations only.
    """
    if n_iters < 30:
        raise ValueError("n_iters must be >= 30")
    predictor = TorchPredictor(model)
    rng = np.random.default_rng(seed)
    images = rng.random((1, predictor.n_frames, fan.image_height, fan.image_width), dtype=np.float32) * fan.mask()
    prior = np.zeros((1, 6), dtype=np.float32)
    for _ in range(n_warmup):
        predictor.predict_batch(images, prior)
    lat = np.empty(n_iters)
    start = time.perf_counter()
    for i in range(n_iters):
        t0 = time.perf_counter()
        predictor.predict_batch(images, prior)
        lat[i] = time.perf_counter() - t0
    total = time.perf_counter() - start
    return {
        "hz": n_iters / total,
        "mean_ms": float(lat.mean() * 1e3),
        "p50_ms": float(np.percentile(lat, 50) * 1e3),
        "p95_ms": float(np.percentile(lat, 95) * 1e3),
        "n_iters": n_iters,
        "n_warmup": n_warmup,
        "total_s": total,
    }


# -- reports -----------------------------------------------------------------

def _result_to_dict(r: RolloutResult) -> dict:
    return {
        "sequence_id": r.sequence_id,
        "bootstrap": r.bootstrap,
        "frame_indices": list(r.frame_indices),
        "image_paths": list(r.image_paths),
        "predicted": r.predicted.tolist(),
        "target": r.target.tolist(),
    }


def _result_from_dict(d: dict) -> RolloutResult:
    return RolloutResult(d["sequence_id"], d["frame_indices"], np.array(d["predicted"]), np.array(d["target"]), d["bootstrap"], d.get("image_paths", []))


def write_frames_csv(path: Path, results: Sequence[RolloutResult]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([
            "sequence_id", "frame_index",
            "pred_x_min", "pred_y_min", "pred_x_max", "pred_y_max", "pred_a_entry", "pred_a_rot",
            "true_x_min", "true_y_min", "true_x_max", "true_y_max", "true_a_entry", "true_a_rot",
            "entry_err", "rot_err", "iou",
        ])
        for r in results:
            e = frame_errors(r)
            for k, fi in enumerate(r.frame_indices):
                pb, pa = ds.denormalize(r.predicted[k])
                tb, ta = ds.denormalize(r.target[k])
                w.writerow([r.sequence_id, fi, *np.round(pb, 6), *np.round(pa, 4), *np.round(tb, 6), *np.round(ta, 4),
                            round(float(e.entry[k]), 4), round(float(e.rot[k]), 4), round(float(e.iou[k]), 6)])


def report(
    report_metrics: MetricsReport,
    results: Sequence[RolloutResult],
    out_dir: str | Path,
    n_overlays: int = 4,
    extra: dict | None = None,
    fan: FanGeometry | None = None,
) -> dict:
    """Write ``report.json``, ``frames.csv`` and Figure-style overlay PNGs into ``out_dir``.

    Returns the report document.
    """
    from . import plotting

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "metrics": report_metrics.to_dict(),
            "colors": {"target": plotting.TARGET_COLOR, "predicted": plotting.PRED_COLOR},
            "fan": fan.to_dict() if fan is not None else None,
            "extra": extra or {},
            "results": [_result_to_dict(r) for r in results],
        }
        (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        write_frames_csv(out / "frames.csv", results)
        overlays = plotting.render_overlays(results[:n_overlays], out / "overlays", fan=fan)
        errplot = plotting.error_curves(results, out / "errors.png")
    except OSError as exc:
        raise IOFailure(f"cannot write report to {out}: {exc}") from exc
    doc["overlay_files"] = [str(p) for p in overlays]
    doc["error_plot"] = str(errplot)
    return doc


def read_report(path: str | Path) -> tuple[MetricsReport, list[RolloutResult], dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise EvaluationError(f"{path}: unsupported report schema {doc.get('schema_version')}")
    return MetricsReport.from_dict(doc["metrics"]), [_result_from_dict(r) for r in doc["results"]], doc


def evaluate_split(predictor: Predictor, root: Path, split: str, bootstrap: str = "ground_truth_first", teacher_forced: bool = False) -> tuple[MetricsReport, list[RolloutResult]]:
    sequences = ds.load_split(root, split)
    usable = [s for s in sequences if len(s) >= predictor.n_frames + 1 and all(fr.annotation.visible for fr in s)]
    if not usable:
        raise EmptyInput(f"split {split!r} has no sequence usable for rollout")
    results = rollout_many(predictor, usable, bootstrap, teacher_forced)
    return metrics(results, config_hash=ds.read_manifest(root).get("config_hash")), results
