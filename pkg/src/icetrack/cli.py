"""``icetrack`` command line: simulate, verify, train, eval, infer, bench, plot.

Exit codes: 0 success, 1 I/O failure, 2 usage or configuration error
(including sequences too short for the model window), 3 data-integrity
violation. The default config path may be given in ``$ICETRACK_CONFIG``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as ds
from .config import CONFIG_ENV, Config, ConfigError, load_config

log = logging.getLogger("icetrack")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INTEGRITY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _set_threads(jobs: int) -> None:
    import torch

    torch.set_num_threads(max(1, jobs))


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args, cfg: Config) -> int:
    from .simulator import generate_dataset

    def progress(meta):
        log.debug("wrote %s/%s", meta["split"], meta["sequence_id"])

    generate_dataset(cfg, seed=args.seed if args.seed is not None else 0, out=args.out, jobs=args.jobs, progress=progress)
    counts = ",".join(f"{k}={v.count}" for k, v in cfg.splits.items())
    print(f"dataset\t{args.out}\t{counts}")
    print(f"manifest_sha256\t{ds.manifest_hash(Path(args.out))}")
    return EXIT_OK


def cmd_verify(args, cfg: Config) -> int:
    splits = ds.verify_integrity(Path(args.data), check_images=not args.fast)
    for name, s in splits.items():
        print(f"{name}\t{s.count}\tok")
    print(f"manifest_sha256\t{ds.manifest_hash(Path(args.data))}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .model import ModelConfig
    from .training import train

    _set_threads(args.jobs)
    if args.seed is not None:
        cfg.train.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    best, tlog = train(args.data, ModelConfig.from_section(cfg.model), cfg.train, out, cfg.to_dict())
    key = cfg.train.select_by
    b = tlog.best(key)
    print(f"best_checkpoint\t{best}")
    print(f"best_epoch\t{b['epoch']}\t{key}\t{b[key]:.6g}\tepoch0_{key}\t{tlog.rows[0][key]:.6g}")
    print(f"min_val_loss\t{tlog.best()['val_loss']:.6g}\tepoch0_val_loss\t{tlog.rows[0]['val_loss']:.6g}")
    return EXIT_OK


def _predictor(args):
    from .evaluation import PriorCopyPredictor, TorchPredictor
    from .model import load_checkpoint

    if args.checkpoint == "prior-copy":
        return PriorCopyPredictor(args.n_frames), None
    model, meta = load_checkpoint(args.checkpoint)
    return TorchPredictor(model), model


def cmd_eval(args, cfg: Config) -> int:
    from .evaluation import evaluate_split, report, throughput
    from .geometry import FanGeometry

    _set_threads(args.jobs)
    predictor, model = _predictor(args)
    root = Path(args.data)
    ds.verify_integrity(root, check_images=False)
    m, results = evaluate_split(predictor, root, args.split, args.bootstrap or cfg.eval.bootstrap, args.teacher_forced)
    fan = FanGeometry(**ds.read_manifest(root)["fan"])
    if args.bench and model is not None:
        m.throughput_hz = throughput(model, fan)["hz"]
    extra = {"checkpoint": str(args.checkpoint), "split": args.split, "dataset": str(root),
             "teacher_forced": bool(args.teacher_forced), "manifest_sha256": ds.manifest_hash(root)}
    doc = report(m, results, args.out, n_overlays=cfg.eval.n_overlays, extra=extra, fan=fan)
    print("entry_err_mean\tentry_err_std\trot_err_mean\trot_err_std\tiou_mean\tiou_std\tn_frames\tn_sequences")
    print(f"{m.entry_err_mean:.4f}\t{m.entry_err_std:.4f}\t{m.rot_err_mean:.4f}\t{m.rot_err_std:.4f}"
          f"\t{m.iou_mean:.4f}\t{m.iou_std:.4f}\t{m.n_frames}\t{m.n_sequences}")
    print(f"report\t{Path(args.out) / 'report.json'}")
    for p in doc["overlay_files"] + [doc["error_plot"]]:
        print(f"figure\t{p}")
    return EXIT_OK


def cmd_infer(args, cfg: Config) -> int:
    from .evaluation import rollout

    _set_threads(args.jobs)
    predictor, _ = _predictor(args)
    seq = ds.load_sequence_dir(Path(args.sequence))
    res = rollout(predictor, seq, args.bootstrap or cfg.eval.bootstrap)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["frame_index", "x_min", "y_min", "x_max", "y_max", "a_entry", "a_rot"])
        for fi, vec in zip(res.frame_indices, res.predicted):
            box, ang = ds.denormalize(vec)
            w.writerow([fi, *np.round(box, 6), *np.round(ang, 4)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_bench(args, cfg: Config) -> int:
    from .evaluation import throughput
    from .geometry import FanGeometry
    from .model import build_model, load_checkpoint, ModelConfig

    _set_threads(args.jobs)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(ModelConfig.from_section(cfg.model), cfg.train.seed)
    f = cfg.scene.fan
    fan = FanGeometry(f.angular_span, f.max_depth, f.image_width, f.image_height)
    runs = [throughput(model, fan, args.warmup, args.iters, seed=k) for k in range(args.runs)]
    hz = np.array([r["hz"] for r in runs])
    print("run\thz\tmean_ms\tp50_ms\tp95_ms")
    for k, r in enumerate(runs):
        print(f"{k}\t{r['hz']:.2f}\t{r['mean_ms']:.3f}\t{r['p50_ms']:.3f}\t{r['p95_ms']:.3f}")
    cv = float(hz.std() / hz.mean()) if hz.size > 1 else 0.0
    print(f"summary\thz_mean={hz.mean():.2f}\thz_cv={cv:.4f}\tthreads={args.jobs}")
    return EXIT_OK


def cmd_plot(args, cfg: Config) -> int:
    from . import plotting
    from .evaluation import read_report
    from .geometry import FanGeometry

    _, results, doc = read_report(args.report)
    fan = FanGeometry(**doc["fan"]) if doc.get("fan") else None
    out = Path(args.out)
    paths = plotting.render_overlays(results[: args.n], out / "overlays", fan=fan)
    paths.append(plotting.error_curves(results, out / "errors.png"))
    for p in paths:
        print(f"figure\t{p}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"YAML config file (default: ${CONFIG_ENV}, else built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set train.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="seed override (dataset seed for simulate, training seed for train)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes / torch threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")

    p = argparse.ArgumentParser(prog="icetrack", description="Catheter-tip tracking in synthetic ICE sequences.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("verify", parents=[common], help="check a dataset's integrity")
    s.add_argument("data", help="dataset directory")
    s.add_argument("--fast", action="store_true", help="skip opening image files")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("train", parents=[common], help="train a tracker (teacher forced)")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run directory for checkpoints and train_log.jsonl")
    s.set_defaults(func=cmd_train)

    def model_args(s):
        s.add_argument("--checkpoint", required=True, help="checkpoint file, or 'prior-copy' for the baseline")
        s.add_argument("--n-frames", type=int, default=5, help="window length for the prior-copy baseline")
        s.add_argument("--bootstrap", choices=["ground_truth_first", "zeros"], help="prior for the first predicted frame")

    s = sub.add_parser("eval", parents=[common], help="autoregressive evaluation with report and figures")
    model_args(s)
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--teacher-forced", action="store_true", help="feed ground-truth priors instead of predictions")
    s.add_argument("--bench", action="store_true", help="also measure throughput into the report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", parents=[common], help="per-frame predictions for one sequence directory")
    model_args(s)
    s.add_argument("sequence", help="sequence directory (frame PNGs + annotations.jsonl)")
    s.add_argument("--out", help="CSV output path (default stdout)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("bench", parents=[common], help="single-window inference throughput")
    s.add_argument("--checkpoint", help="checkpoint file (default: untrained model from the config)")
    s.add_argument("--iters", type=int, default=100)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--runs", type=int, default=5)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot", parents=[common], help="render overlays and error curves from a saved report")
    s.add_argument("report", help="report.json or its directory")
    s.add_argument("--out", required=True)
    s.add_argument("-n", type=int, default=4, help="number of sequences to overlay")
    s.set_defaults(func=cmd_plot)
    return p


def _exit_code(exc: BaseException) -> int:
    from .evaluation import EmptyInput, IOFailure
    from .model import CheckpointVersionMismatch

    if isinstance(exc, (ConfigError, UsageError, ds.TooShort, EmptyInput, CheckpointVersionMismatch, ValueError)):
        return EXIT_USAGE
    if isinstance(exc, ds.DatasetError):
        return EXIT_INTEGRITY
    if isinstance(exc, (OSError, IOFailure)):
        return EXIT_IO
    return EXIT_IO


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_config(args.config, args.overrides)
        return args.func(args, cfg)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"icetrack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose >= 2:
            raise
        return code


if __name__ == "__main__":
    sys.exit(main())
