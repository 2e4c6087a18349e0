"""Command-line entry point: ``inertrack <command> [options] [--section.key value ...]``.

Commands: ``synth``, ``preprocess``, ``train``, ``eval``, ``track``,
``export-features`` and ``heading-drift``. Global flags go before the
command; configuration overrides go after the command's own options.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .baseline import complementary_corrected_velocity, ekf_track, heading_drift_report, ndi_track
from .config import RunConfig, load_run_config, parse_overrides
from .errors import ConfigError, InertrackError, SequenceTooShortError
from .ingest import (
    DEFAULT_RATIOS,
    SPLITS,
    SequenceRecord,
    SynthParams,
    read_manifest,
    save_sequence,
    split_manifest,
    synth_sequence,
    write_manifest,
)
from .metrics import MetricsReport, Trajectory, aggregate, evaluate, integrate_velocity
from .preprocess import NormalizationStats, SegmentSample, feature_streams, gt_velocity
from .tfbrt import TFBRT
from .train import Trainer, TrainingLog, export_hidden_features, model_from_checkpoint
from .utils import write_json
from .validators import validate_positive_int

logger = logging.getLogger(__name__)

METHODS = ("tfbrt", "tfbrt-cf", "ndi", "ekf")
# how each method is started; the baselines receive the true first velocity
INITIAL_VELOCITY = {"tfbrt": "none", "tfbrt-cf": "none", "ndi": "ground_truth", "ekf": "ground_truth"}


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _out_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(args.out) if args.out else Path(config.run.out)


def _manifest_path(args: argparse.Namespace, config: RunConfig) -> Path:
    manifest = getattr(args, "manifest", None) or config.run.manifest
    if manifest is None:
        raise ConfigError(["run.manifest is required (config file, --run.manifest or --manifest)"])
    return Path(manifest)


def _split_paths(args: argparse.Namespace, config: RunConfig, split: str) -> Tuple[str, ...]:
    paths = read_manifest(_manifest_path(args, config)).split(split)
    if not paths:
        raise ValueError(f"split '{split}' of the manifest is empty")
    return paths


def _segments(records: Sequence[SequenceRecord], config: RunConfig) -> List[SegmentSample]:
    segments: List[SegmentSample] = []
    for record in records:
        try:
            segments.extend(config.data.segments(record))
        except SequenceTooShortError as exc:
            logger.warning("skipping %s: %s", record.id, exc)
    return segments


def _require_checkpoint(args: argparse.Namespace) -> Path:
    if not args.checkpoint:
        raise ConfigError(["--checkpoint is required"])
    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _ground_truth(record: SequenceRecord, config: RunConfig, count: int) -> Tuple[Trajectory, np.ndarray]:
    gt_vel = gt_velocity(record, stride=config.data.velocity_stride)[:count]
    return Trajectory(record.t[:count], record.gt_pos[:count, :2]), gt_vel


def _evaluate_record(path: str, method: str, model: Optional[TFBRT], config: RunConfig) -> MetricsReport:
    record = config.data.load(path)
    if not record.has_ground_truth:
        raise ValueError(f"{path} has no ground-truth positions to evaluate against")
    eps = config.data.orientation_eps
    if method in ("tfbrt", "tfbrt-cf"):
        velocity = model.predict_sequence(record, config.data)
        if method == "tfbrt-cf":
            velocity = complementary_corrected_velocity(velocity, record, config.cf)
        gt, gt_vel = _ground_truth(record, config, len(velocity))
        pred = integrate_velocity(velocity, record.dt, origin=gt.positions[0], t0=float(record.t[0]))
        return evaluate(pred, gt, record.id, pred_vel=velocity, gt_vel=gt_vel, eps=eps)

    gt, gt_vel = _ground_truth(record, config, len(record))
    initial_velocity = (gt_vel[0, 0], gt_vel[0, 1], 0.0)
    if method == "ndi":
        track = ndi_track(record, initial_velocity)
    else:
        track = ekf_track(record, config.ekf, initial_velocity).trajectory
    pred = Trajectory(track.t, track.positions + gt.positions[0])
    return evaluate(pred, gt, record.id, gt_vel=gt_vel, eps=eps)


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------
def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    count = validate_positive_int(args.n, "n")
    seed = int(args.seed if args.seed is not None else config.train.seed)
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)

    children = np.random.SeedSequence(seed).spawn(count)
    names = []
    for index, child in enumerate(children):
        rng = np.random.default_rng(child)
        params = SynthParams(
            duration=args.duration,
            fs=args.fs,
            max_speed=float(rng.uniform(0.3, args.max_speed)),
            acc_noise=args.acc_noise,
            gyro_noise=args.gyro_noise,
            mag_noise=args.mag_noise,
            seed=int(child.generate_state(1)[0]),
        )
        name = f"seq_{index:03d}.csv"
        save_sequence(synth_sequence(params, sequence_id=f"seq_{index:03d}"), out / name)
        names.append(name)
    manifest = split_manifest(names, DEFAULT_RATIOS, seed=seed)
    write_manifest(manifest, out / "manifest.tsv")
    logger.info("wrote %d sequences to %s (split sizes %s)", count, out, manifest.sizes())
    return 0


def cmd_preprocess(args: argparse.Namespace, config: RunConfig) -> int:
    manifest = read_manifest(_manifest_path(args, config))
    out = _out_dir(args, config) / "features"
    out.mkdir(parents=True, exist_ok=True)

    train_windows = []
    for split in SPLITS:
        for path in manifest.split(split):
            record = config.data.load(path)
            features, velocity = feature_streams(
                record,
                cutoff_hz=config.data.mag_cutoff_hz,
                stride=config.data.velocity_stride,
                mag_feature=config.data.mag_feature,
            )
            table = pd.DataFrame(features, columns=list(config.data.channels))
            table.insert(0, "t", record.t)
            if velocity is not None:
                table["vel_x"] = velocity[:, 0]
                table["vel_y"] = velocity[:, 1]
            table.to_csv(out / f"{Path(path).stem}.csv", index=False, lineterminator="\n")
            if split == "train":
                train_windows.extend(config.data.windows(record))
    if not train_windows:
        raise ValueError("the training split produced no windows to fit normalization statistics")
    stats = NormalizationStats.fit(train_windows)
    write_json(stats.to_dict(), out.parent / "normalization.json")
    logger.info("features written to %s", out)
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    train_paths = _split_paths(args, config, "train")
    val_paths = _split_paths(args, config, "validation")
    out = _out_dir(args, config)
    checkpoint_dir = Path(config.train.checkpoint_dir) if config.train.checkpoint_dir else out / "checkpoints"
    resume_from = checkpoint_dir / "last.ckpt"
    if args.resume and not resume_from.is_file():
        raise FileNotFoundError(f"nothing to resume: {resume_from} does not exist")

    train_segments = _segments([config.data.load(path) for path in train_paths], config)
    val_segments = _segments([config.data.load(path) for path in val_paths], config)
    if not train_segments:
        raise ValueError("the training split produced no segments")
    if not val_segments:
        raise ValueError("the validation split produced no segments")

    train_config = config.train
    train_config.checkpoint_dir = str(checkpoint_dir)
    log = TrainingLog(out / "train_log.jsonl")
    try:
        if args.resume:
            trainer = Trainer.from_checkpoint(resume_from, train_config, config.data, log, expected=config.model)
            logger.info("resuming from epoch %d", trainer.epoch)
        else:
            windows = [window for segment in train_segments for window in segment.windows]
            model = TFBRT(config.model, stats=NormalizationStats.fit(windows), seed=train_config.seed)
            trainer = Trainer(model, train_config, config.data, log)
        trainer.fit(train_segments, val_segments)
    finally:
        log.close()
    logger.info("training finished at epoch %d (best validation %.5f)", trainer.epoch, trainer.best_val)
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    if args.method not in METHODS:
        raise ConfigError([f"--method must be one of {', '.join(METHODS)}"])
    model = None
    if args.method.startswith("tfbrt"):
        model = model_from_checkpoint(_require_checkpoint(args), expected=config.model)
    paths = _split_paths(args, config, args.split)
    out = _out_dir(args, config)

    def run(path: str) -> MetricsReport:
        return _evaluate_record(path, args.method, model, config)

    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        reports = list(pool.map(run, paths))
    payload: Dict[str, Any] = {
        "method": args.method,
        "split": args.split,
        "initial_velocity": INITIAL_VELOCITY[args.method],
        "sequences": [report.to_dict() for report in reports],
        "aggregate": aggregate(reports),
    }
    out.mkdir(parents=True, exist_ok=True)
    write_json(payload, out / f"metrics_{args.method}_{args.split}.json")
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_track(args: argparse.Namespace, config: RunConfig) -> int:
    model = model_from_checkpoint(_require_checkpoint(args), expected=config.model)
    record = config.data.load(args.sequence)
    velocity = model.predict_sequence(record, config.data)
    count = len(velocity)
    origin = record.gt_pos[0, :2] if record.has_ground_truth else np.zeros(2)
    track = integrate_velocity(velocity, record.dt, origin=origin, t0=float(record.t[0]))

    trace = pd.DataFrame(
        {
            "t": record.t[:count],
            "x": track.positions[:, 0],
            "y": track.positions[:, 1],
            "vx": velocity[:, 0],
            "vy": velocity[:, 1],
        }
    )
    if record.has_ground_truth:
        trace["gx"] = record.gt_pos[:count, 0]
        trace["gy"] = record.gt_pos[:count, 1]
    path = Path(args.trace) if args.trace else _out_dir(args, config) / f"{record.id}_trace.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(path, index=False, lineterminator="\n")
    logger.info("trace of %d samples written to %s", count, path)
    return 0


def cmd_export_features(args: argparse.Namespace, config: RunConfig) -> int:
    model = model_from_checkpoint(_require_checkpoint(args), expected=config.model)
    segments = _segments([config.data.load(path) for path in _split_paths(args, config, args.split)], config)
    if not segments:
        raise ValueError(f"split '{args.split}' produced no segments")
    path = _out_dir(args, config) / "hidden_features.csv"
    export_hidden_features(model, segments, path)
    return 0


def cmd_heading_drift(args: argparse.Namespace, config: RunConfig) -> int:
    paths = _split_paths(args, config, args.split)
    sequences = []
    for path in paths:
        record = config.data.load(path)
        report = heading_drift_report(record, config.ekf)
        sequences.append({"sequence_id": record.id, **report.rmse})
        logger.info("%s heading RMSE %s", record.id, report.rmse)
    payload = {"split": args.split, "sequences": sequences}
    out = _out_dir(args, config)
    out.mkdir(parents=True, exist_ok=True)
    write_json(payload, out / f"heading_drift_{args.split}.json")
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "track": cmd_track,
    "export-features": cmd_export_features,
    "heading-drift": cmd_heading_drift,
}


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inertrack", description="Inertial tracking toolkit")
    parser.add_argument("--config", help="flat section.key = value configuration file")
    parser.add_argument("--seed", type=int, help="seed overriding train.seed")
    parser.add_argument("--out", help="output directory overriding run.out")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write synthetic sequences and a manifest")
    synth.add_argument("--n", type=int, default=25, help="number of sequences")
    synth.add_argument("--duration", type=float, default=60.0, help="seconds per sequence")
    synth.add_argument("--fs", type=float, default=200.0, help="sample rate in Hz")
    synth.add_argument("--max-speed", type=float, default=1.5, help="upper bound of the per-sequence speed cap")
    synth.add_argument("--acc-noise", type=float, default=0.0)
    synth.add_argument("--gyro-noise", type=float, default=0.0)
    synth.add_argument("--mag-noise", type=float, default=0.0)

    preprocess = commands.add_parser("preprocess", help="write feature tables and normalization statistics")
    preprocess.add_argument("--manifest")

    train = commands.add_parser("train", help="train TF-BRT")
    train.add_argument("--manifest")
    train.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    evaluate_cmd = commands.add_parser("eval", help="evaluate a method on a manifest split")
    evaluate_cmd.add_argument("--manifest")
    evaluate_cmd.add_argument("--checkpoint")
    evaluate_cmd.add_argument("--split", default="test_seen", choices=SPLITS)
    evaluate_cmd.add_argument("--method", default="tfbrt", choices=METHODS)

    track = commands.add_parser("track", help="write the predicted trajectory of one sequence")
    track.add_argument("--checkpoint")
    track.add_argument("--sequence", required=True)
    track.add_argument("--trace", help="output CSV path")

    export = commands.add_parser("export-features", help="export per-window hidden features")
    export.add_argument("--manifest")
    export.add_argument("--checkpoint")
    export.add_argument("--split", default="test_seen", choices=SPLITS)

    drift = commands.add_parser("heading-drift", help="yaw RMSE of gyro, magnetometer and EKF headings")
    drift.add_argument("--manifest")
    drift.add_argument("--split", default="test_seen", choices=SPLITS)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        overrides = parse_overrides(extra)
        if args.seed is not None:
            overrides["train.seed"] = str(args.seed)
        if args.threads < 1:
            raise ConfigError(["--threads must be at least 1"])
        config = load_run_config(args.config, overrides)
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except (InertrackError, ValueError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
