"""Command-line surface binding the modules into runnable workflows.

Subcommands:
  simulate       generate a synthetic dataset (boxes, embeddings, labels)
  track          associate detections + embeddings into identity tracks
  train-matcher  fit the pair-affinity head on labeled detections
  train-lstm     fit the motion forecaster on ground-truth tracks
  evaluate       score tracker results against ground truth
  ablate         compare tracker variants on a synthetic benchmark set

Every subcommand takes ``--seed`` and is deterministic under it. Tracker
hyperparameters come from ``--preset {mot17,kitti,nuscenes}`` or a
``--config <json>`` file (mutually exclusive); result files written by
``track`` are valid ``evaluate`` input. Errors exit nonzero with a
message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .associator import Tracker
from .core import PRESETS, Detection, Observation, TrackerConfig, preset_config
from .formats import (
    DetectionRow,
    attach_embeddings,
    load_checkpoint,
    load_config,
    read_detections,
    read_embeddings,
    rows_to_objects,
    save_checkpoint,
    write_detections,
    write_embeddings,
)
from .matcher import DEFAULT_HIDDEN
from .metrics import clear_mot, format_report
from .motion import MotionParams, train_lstm
from .simulator import (
    AblationModels,
    AblationVariant,
    Scenario,
    ScenarioConfig,
    ablation_run,
    generate,
)
from .training import LabeledFrame, evaluate_pair_accuracy, train_matcher

__all__ = ["build_parser", "run_cli", "main"]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--seed", type=int, default=0, help="deterministic RNG seed")
    group = sub.add_mutually_exclusive_group()
    group.add_argument(
        "--preset", choices=sorted(PRESETS), help="named tracker parameter set"
    )
    group.add_argument("--config", help="tracker config JSON file")


def _tracker_config(args) -> TrackerConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    if getattr(args, "preset", None):
        return preset_config(args.preset)
    return TrackerConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embtrack",
        description="embedding-based multi-object tracking toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--objects", type=int, default=10)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument(
        "--profile", choices=("constant", "turning", "random_walk"), default="constant"
    )
    p.add_argument("--speed", type=float, nargs=2, default=(2.0, 6.0),
                   metavar=("LO", "HI"))
    p.add_argument("--occlusion-rate", type=float, default=0.0)
    p.add_argument("--occlusion-length", type=int, nargs=2, default=(5, 15),
                   metavar=("LO", "HI"))
    p.add_argument("--fn-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--embed-noise", type=float, default=0.05)
    p.add_argument("--confusable", type=float, default=0.0)
    p.add_argument(
        "--scenario-config", help="full scenario config JSON (overrides the flags)"
    )
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("track", help="run the tracker over a detection file")
    p.add_argument("--det", required=True, help="detection CSV")
    p.add_argument("--emb", help="embedding sidecar (omit for geometry-only tracking)")
    p.add_argument("--checkpoint", help="trained weights (matcher, optional motion)")
    p.add_argument("--motion-checkpoint", help="separate motion weights")
    p.add_argument("--out", required=True, help="results CSV")
    _add_common(p)
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("train-matcher", help="fit the pair-affinity head")
    p.add_argument("--labels", action="append", required=True,
                   help="labeled detection CSV (repeatable, one per sequence)")
    p.add_argument("--emb", action="append", required=True,
                   help="embedding sidecar aligned with --labels (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--hidden", default=",".join(str(w) for w in DEFAULT_HIDDEN),
                   help="comma-separated hidden layer widths")
    _add_common(p)
    p.set_defaults(func=_cmd_train_matcher)

    p = sub.add_parser("train-lstm", help="fit the motion forecaster")
    p.add_argument("--gt", action="append", required=True,
                   help="ground-truth track CSV (repeatable)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--mode", choices=("2d", "3d"), default="2d")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--past-window", type=int, default=10)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=_cmd_train_lstm)

    p = sub.add_parser("evaluate", help="score results against ground truth")
    p.add_argument("--gt", required=True, help="ground-truth CSV")
    p.add_argument("--results", required=True, help="tracker results CSV")
    p.add_argument("--mode", choices=("2d", "3d"), default="2d")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--dist-threshold", type=float, default=2.0,
                   help="3D center-distance match threshold (meters)")
    p.add_argument("--json", help="also write metrics as JSON here")
    _add_common(p)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="compare tracker variants on synthetic data")
    p.add_argument("--checkpoint", required=True, help="full-width matcher weights")
    p.add_argument("--quarter-checkpoint",
                   help="matcher trained on quarter-width embeddings")
    p.add_argument("--motion-checkpoint", help="motion forecaster weights")
    p.add_argument("--videos", type=int, default=6)
    p.add_argument("--objects", type=int, default=12)
    p.add_argument("--frames", type=int, default=80)
    p.add_argument("--occlusion-rate", type=float, default=0.6)
    p.add_argument("--speed", type=float, nargs=2, default=(6.0, 12.0),
                   metavar=("LO", "HI"))
    p.add_argument("--json", help="also write the variant table as JSON here")
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def _scenario_config_from_args(args) -> ScenarioConfig:
    if args.scenario_config:
        with open(args.scenario_config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        return _scenario_config_from_dict(data)
    return ScenarioConfig(
        n_objects=args.objects,
        n_frames=args.frames,
        motion_profile=args.profile,
        speed_range=tuple(args.speed),
        occlusion_rate=args.occlusion_rate,
        occlusion_length_range=tuple(args.occlusion_length),
        fn_rate=args.fn_rate,
        fp_rate=args.fp_rate,
        jitter_sigma=args.jitter,
        embed_dim=args.embed_dim,
        embed_noise=args.embed_noise,
        confusable_fraction=args.confusable,
        seed=args.seed,
    )


def _scenario_config_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ValueError("scenario config JSON must be an object")
    known = {f for f in ScenarioConfig.__dataclass_fields__}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown scenario config keys: {', '.join(unknown)}")
    for key in ("arena", "speed_range", "turn_rate_range", "box_size_range",
                "occlusion_length_range"):
        if key in data:
            data[key] = tuple(data[key])
    if data.get("occlusion_windows") is not None:
        data["occlusion_windows"] = {
            int(k): [tuple(w) for w in v]
            for k, v in data["occlusion_windows"].items()
        }
    return ScenarioConfig(**data)


def _scenario_to_files(scenario: Scenario, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    gt_rows = {
        frame: [DetectionRow(frame, tid, box) for tid, box in items]
        for frame, items in scenario.gt_frames().items()
    }
    write_detections(out_dir / "gt.txt", gt_rows)
    det_rows: dict = {}
    label_rows: dict = {}
    embeddings: dict = {}
    for frame, dets in scenario.detections.items():
        labels = scenario.labels[frame]
        det_rows[frame] = [
            DetectionRow(frame, -1, d.box, d.confidence, d.class_id) for d in dets
        ]
        label_rows[frame] = [
            DetectionRow(frame, lab, d.box, d.confidence, d.class_id)
            for d, lab in zip(dets, labels)
        ]
        embeddings[frame] = (
            np.stack([d.embedding for d in dets])
            if dets
            else np.zeros((0, scenario.config.embed_dim))
        )
    write_detections(out_dir / "det.txt", det_rows)
    write_detections(out_dir / "labels.txt", label_rows)
    write_embeddings(out_dir / "emb.bin", embeddings, scenario.config.embed_dim)
    cfg = asdict(scenario.config)
    if cfg.get("occlusion_windows") is not None:
        cfg["occlusion_windows"] = {
            str(k): [list(w) for w in v]
            for k, v in cfg["occlusion_windows"].items()
        }
    with open(out_dir / "scenario.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cmd_simulate(args) -> int:
    cfg = _scenario_config_from_args(args)
    if args.scenario_config and args.seed:
        cfg = replace(cfg, seed=args.seed)
    scenario = generate(cfg)
    out_dir = Path(args.out)
    _scenario_to_files(scenario, out_dir)
    n_det = sum(len(v) for v in scenario.detections.values())
    print(
        f"wrote {out_dir}/: {cfg.n_objects} objects, {cfg.n_frames} frames, "
        f"{n_det} detections (gt.txt, det.txt, labels.txt, emb.bin, scenario.json)"
    )
    return 0


def _load_models(args) -> tuple:
    matcher = motion = None
    if getattr(args, "checkpoint", None):
        ckpt = load_checkpoint(args.checkpoint)
        matcher = ckpt["matcher"]
        motion = ckpt["motion"]
    if getattr(args, "motion_checkpoint", None):
        motion = load_checkpoint(args.motion_checkpoint)["motion"]
        if motion is None:
            raise ValueError(f"{args.motion_checkpoint}: no motion weights inside")
    return matcher, motion


def _cmd_track(args) -> int:
    config = _tracker_config(args)
    matcher, motion = _load_models(args)
    rows = read_detections(args.det, mode=config.mode)
    if args.emb:
        embeddings = read_embeddings(args.emb)
        frames = attach_embeddings(rows, embeddings)
        width = next((e.shape[1] for e in embeddings.values()), config.embed_dim)
    else:
        if matcher is not None:
            raise ValueError("--checkpoint with a matcher needs --emb embeddings")
        frames = {f: [_bare_detection(r) for r in rs] for f, rs in rows.items()}
        width = config.embed_dim
    if matcher is not None and matcher.embed_dim != width:
        raise ValueError(
            f"embedding width {width} != matcher width {matcher.embed_dim}"
        )
    if config.embed_dim != width:
        config = replace(config, embed_dim=width)
    if config.motion_model == "lstm" and motion is None:
        raise ValueError("config wants the lstm motion model but no motion weights given")
    tracker = Tracker(config, matcher, motion)
    out_rows: dict = {}
    for frame in sorted(frames):
        dets = frames[frame]
        result = tracker.step(frame, dets)
        out_rows[frame] = [
            DetectionRow(frame, tid, dets[di].box, dets[di].confidence,
                         dets[di].class_id)
            for di, tid in sorted(result.outputs.items())
        ]
    write_detections(args.out, out_rows, mode=config.mode)
    n_out = sum(len(v) for v in out_rows.values())
    ids = {r.track_id for rows_ in out_rows.values() for r in rows_}
    print(
        f"wrote {args.out}: {n_out} rows over {len(out_rows)} frames, "
        f"{len(ids)} identities"
    )
    return 0


def _bare_detection(row: DetectionRow) -> Detection:
    return Detection(
        frame=row.frame,
        box=row.box,
        confidence=float(np.clip(row.confidence, 0.0, 1.0)),
        class_id=row.class_id,
        embedding=np.zeros(1),
    )


def _labeled_sequence(labels_path, emb_path) -> tuple[list[LabeledFrame], int]:
    rows = read_detections(labels_path)
    embeddings = read_embeddings(emb_path)
    frames = sorted(set(rows) | set(embeddings))
    width = next((e.shape[1] for e in embeddings.values()), 0)
    seq = []
    for frame in frames:
        rs = rows.get(frame, [])
        emb = embeddings.get(frame, np.zeros((0, width)))
        if emb.shape[0] != len(rs):
            raise ValueError(
                f"frame {frame}: {len(rs)} labeled rows but {emb.shape[0]} embeddings"
            )
        ids = []
        keep = []
        for i, r in enumerate(rs):
            if r.track_id >= 0:
                ids.append(r.track_id)
                keep.append(i)
        seq.append(LabeledFrame(ids=ids, embeddings=emb[keep] if keep else
                                np.zeros((0, width))))
    return seq, width


def _cmd_train_matcher(args) -> int:
    if len(args.labels) != len(args.emb):
        raise ValueError("--labels and --emb must be given the same number of times")
    dataset = []
    widths = set()
    for labels_path, emb_path in zip(args.labels, args.emb):
        seq, width = _labeled_sequence(labels_path, emb_path)
        dataset.append(seq)
        widths.add(width)
    if len(widths) != 1:
        raise ValueError(f"sequences disagree on embedding width: {sorted(widths)}")
    width = widths.pop()
    config = replace(_tracker_config(args), embed_dim=width)
    hidden = tuple(int(w) for w in args.hidden.split(",") if w)
    rng = np.random.default_rng(args.seed)
    params, history = train_matcher(
        dataset,
        config,
        epochs=args.epochs,
        hidden=hidden,
        lr=args.lr,
        batch_size=args.batch,
        steps_per_epoch=args.steps,
        rng=rng,
    )
    save_checkpoint(args.out, matcher=params)
    accuracy = evaluate_pair_accuracy(params, dataset, config, rng=rng, n_pairs=100)
    print(
        f"trained {args.epochs} epochs, loss {history[0]:.4f} -> {history[-1]:.4f}, "
        f"pair accuracy {accuracy:.3f}; wrote {args.out}"
    )
    return 0


def _cmd_train_lstm(args) -> int:
    tracks: list[list[Observation]] = []
    for path in args.gt:
        rows = read_detections(path, mode=args.mode)
        by_id: dict = {}
        for frame in sorted(rows):
            for r in rows[frame]:
                if r.track_id < 0:
                    raise ValueError(f"{path}: frame {frame} has an unlabeled row")
                by_id.setdefault(r.track_id, []).append(
                    Observation(frame, r.box, np.zeros(1))
                )
        tracks.extend(by_id[tid] for tid in sorted(by_id))
    rng = np.random.default_rng(args.seed)
    params = MotionParams.create(
        mode=args.mode, hidden_dim=args.hidden, horizon=args.horizon, rng=rng
    )
    history = train_lstm(
        tracks,
        params,
        past_window=args.past_window,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        rng=rng,
    )
    save_checkpoint(args.out, motion=params)
    print(
        f"trained {args.epochs} epochs on {len(tracks)} tracks, "
        f"loss {history[0]:.5f} -> {history[-1]:.5f}; wrote {args.out}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    gt = rows_to_objects(read_detections(args.gt, mode=args.mode))
    hyp = rows_to_objects(read_detections(args.results, mode=args.mode))
    ev = clear_mot(
        gt,
        hyp,
        iou_threshold=args.iou_threshold,
        mode=args.mode,
        dist_threshold=args.dist_threshold,
    )
    name = Path(args.results).stem
    print(format_report({name: ev}))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            fh.write(ev.to_json())
            fh.write("\n")
    return 0


def _cmd_ablate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    matcher_full = ckpt["matcher"]
    if matcher_full is None:
        raise ValueError(f"{args.checkpoint}: no matcher weights inside")
    motion = ckpt["motion"]
    matcher_quarter = None
    if args.quarter_checkpoint:
        matcher_quarter = load_checkpoint(args.quarter_checkpoint)["matcher"]
        if matcher_quarter is None:
            raise ValueError(f"{args.quarter_checkpoint}: no matcher weights inside")
        if matcher_quarter.embed_dim != matcher_full.embed_dim // 4:
            raise ValueError(
                "quarter matcher width must be a quarter of the full matcher's"
            )
    if args.motion_checkpoint:
        motion = load_checkpoint(args.motion_checkpoint)["motion"]
        if motion is None:
            raise ValueError(f"{args.motion_checkpoint}: no motion weights inside")

    embed_dim = matcher_full.embed_dim
    scenarios = [
        generate(
            ScenarioConfig(
                n_objects=args.objects,
                n_frames=args.frames,
                motion_profile="turning",
                speed_range=tuple(args.speed),
                occlusion_rate=args.occlusion_rate,
                occlusion_length_range=(4, 8),
                jitter_sigma=1.0,
                embed_dim=embed_dim,
                embed_noise=0.05,
                seed=args.seed + i,
            )
        )
        for i in range(args.videos)
    ]
    variants = [AblationVariant("iou-only", "none", "none", True)]
    if matcher_quarter is not None:
        variants.append(AblationVariant("emb-single", "single", "none", False))
    variants.append(AblationVariant("emb-multi", "multi", "none", False))
    variants.append(AblationVariant("emb+kalman", "multi", "kalman", False))
    if motion is not None:
        variants.append(AblationVariant("emb+lstm", "multi", "lstm", False))
    variants.append(AblationVariant("emb+kalman+iou", "multi", "kalman", True))

    base = _tracker_config(args)
    models = AblationModels(
        matcher_full=matcher_full, matcher_quarter=matcher_quarter, motion=motion
    )
    rows = ablation_run(scenarios, variants, models, base)
    header = f"{'variant':<16}{'MOTA':>8}{'MT':>8}{'ML':>8}{'IDS':>6}{'FP':>6}{'FN':>6}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['variant']:<16}{r['mota']:>8.4f}{r['mt']:>8.3f}{r['ml']:>8.3f}"
            f"{r['ids']:>6d}{r['fp']:>6d}{r['fn']:>6d}"
        )
    print("\n".join(lines))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
            fh.write("\n")
    return 0


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except Exception as exc:  # CLI boundary: report, don't traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
