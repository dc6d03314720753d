"""Figure output: target/prediction overlays and per-frame error curves.

Target state is drawn in blue, the prediction in orange.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from . import dataset as ds  # noqa: E402

TARGET_COLOR = "#1f77b4"
PRED_COLOR = "#ff7f0e"
DPI = 100


def _frame_image(path: str, fan) -> np.ndarray:
    try:
        return ds.read_png(Path(path)).astype(float) / 255.0
    except (ds.MissingFile, OSError):
        if fan is not None:
            return fan.mask().astype(float) * 0.15
        return np.zeros((64, 64))


def draw_state(ax, vec, shape, color: str, label: str | None = None) -> None:
    """Box plus a heading arrow (rotation angle) for one normalized state vector."""
    box, angle = ds.denormalize(vec)
    h, w = shape
    x0, y0, x1, y1 = np.clip(box, 0, 1) * [w, h, w, h]
    ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, edgecolor=color, linewidth=1.5, label=label))
    cu, cv = (x0 + x1) / 2, (y0 + y1) / 2
    r = math.radians(angle[1])
    length = 0.12 * max(h, w)
    ax.annotate(
        "",
        xy=(cu + length * math.sin(r), cv + length * math.cos(r)),
        xytext=(cu, cv),
        arrowprops=dict(arrowstyle="->", color=color, lw=1.5),
    )


def overlay_figure(result, fan=None, n_panels: int = 3):
    t = len(result.frame_indices)
    picks = sorted({0, t // 2, t - 1})[:n_panels]
    fig, axes = plt.subplots(1, len(picks), figsize=(3.2 * len(picks), 3.6), squeeze=False)
    for ax, k in zip(axes[0], picks):
        img = _frame_image(result.image_paths[k], fan) if result.image_paths else np.zeros((64, 64))
        ax.imshow(img, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        draw_state(ax, result.target[k], img.shape, TARGET_COLOR, "target")
        draw_state(ax, result.predicted[k], img.shape, PRED_COLOR, "predicted")
        _, pa = ds.denormalize(result.predicted[k])
        _, ta = ds.denormalize(result.target[k])
        ax.set_title(
            f"frame {result.frame_indices[k]}\nentry {ta[0]:.0f}/{pa[0]:.0f}  rot {ta[1]:.0f}/{pa[1]:.0f}",
            fontsize=8,
        )
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][0].legend(loc="lower left", fontsize=7, framealpha=0.6)
    fig.suptitle(result.sequence_id, fontsize=9)
    fig.tight_layout()
    return fig


def render_overlays(results: Sequence, out_dir: Path, fan=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in results:
        fig = overlay_figure(r, fan)
        p = out_dir / f"{r.sequence_id}.png"
        fig.savefig(p, dpi=DPI)
        plt.close(fig)
        paths.append(p)
    return paths


def error_curves(results: Sequence, path: Path) -> Path:
    """Mean entry/rotation error and IoU against rollout step."""
    from .evaluation import frame_errors

    errs = [frame_errors(r) for r in results]
    steps = max(len(e.iou) for e in errs)

    def mean_at(attr):
        out = []
        for k in range(steps):
            vals = [getattr(e, attr)[k] for e in errs if len(e.iou) > k]
            out.append(np.mean(vals))
        return np.array(out)

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    x = np.arange(steps)
    a1.plot(x, mean_at("entry"), label="entry", color=TARGET_COLOR)
    a1.plot(x, mean_at("rot"), label="rotation", color=PRED_COLOR)
    a1.set_xlabel("rollout step")
    a1.set_ylabel("error (deg)")
    a1.legend(fontsize=8)
    a2.plot(x, mean_at("iou"), color="k")
    a2.set_ylim(0, 1)
    a2.set_xlabel("rollout step")
    a2.set_ylabel("IoU")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
