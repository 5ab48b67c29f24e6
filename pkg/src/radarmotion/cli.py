"""Command-line surface: simulate, train, evaluate, baselines, grad-check.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .geometry import mix_seed
from .metrics import MetricsReport
from .network import load_model, save_model
from .simulate import (
    SceneConfig,
    simulate_sequence,
    split_dataset,
    write_sequence,
)
from .training import (
    ExperimentConfig,
    ValidationError,
    config_from_file,
    evaluate_icp,
    evaluate_ransac,
    evaluate_repeated,
    evaluate_threshold_mos,
    load_split,
    train_eve,
    train_mos,
)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _experiment_config(args) -> ExperimentConfig:
    overrides = {}
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if args.seed is not None:
        overrides["seed"] = args.seed
    for attr, key in (("epochs_eve", "eve_epochs"), ("epochs_mos", "mos_epochs"),
                      ("point_budget", "point_budget"), ("batch_size", "batch_size"),
                      ("repeats", "repeats"), ("time_gap", "time_gap")):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    if args.config:
        return config_from_file(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--config", type=str, default=None,
                   help="flat key=value experiment config file")


def _cmd_simulate(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ValidationError(f"output directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(mix_seed(seed, 0xD47A))

    names = []
    for i in range(args.sequences):
        ego = float(rng.uniform(args.ego_speed_min, args.ego_speed_max))
        cfg = SceneConfig(
            n_static=args.static,
            n_objects=args.objects,
            object_points=(args.object_points_min, args.object_points_max),
            object_speed=(args.object_speed_min, args.object_speed_max),
            ego_speed=ego,
            velocity_noise=args.velocity_noise,
            position_noise=args.position_noise,
            dropout=args.dropout,
            n_frames=args.frames,
            frame_rate=args.frame_rate,
            seed=mix_seed(seed, 0x5E0, i),
        )
        seq = simulate_sequence(cfg)
        name = f"seq_{i:04d}"
        write_sequence(seq, out / name)
        names.append(name)

    train, val, test = split_dataset(names, tuple(args.split), seed=seed)
    with open(out / "manifest.csv", "w", encoding="utf-8") as fh:
        fh.write("split,sequence\n")
        for split, group in (("train", train), ("val", val), ("test", test)):
            for name in sorted(group):
                fh.write(f"{split},{name}\n")
    print(f"wrote {len(names)} sequences to {out} "
          f"(train/val/test = {len(train)}/{len(val)}/{len(test)})")
    return 0


def _cmd_train_eve(args) -> int:
    config = _experiment_config(args)
    train_seqs = load_split(config.data_dir, "train")
    val_seqs = load_split(config.data_dir, "val")
    result = train_eve(config, train_seqs, val_seqs,
                       progress=print if args.verbose else None)
    out = Path(args.out)
    save_model(out, result.model, epoch=result.best_epoch,
               extra={"val_mae": result.best_metric,
                      "skipped_no_static": result.skipped_no_static})
    curve_path = out.with_suffix(".curve.csv")
    curve_path.write_text(result.curve_csv(), encoding="utf-8")
    print(f"best val MAE {result.best_metric:.4f} at epoch {result.best_epoch}; "
          f"checkpoint {out}, curve {curve_path}")
    if result.skipped_no_static:
        print(f"skipped {result.skipped_no_static} pair draws with no static points")
    return 0


def _cmd_train_mos(args) -> int:
    config = _experiment_config(args)
    if args.no_velocity and args.raw_velocity:
        raise ValidationError("--no-velocity and --raw-velocity are exclusive")
    if args.no_velocity:
        config = replace(config, velocity_mode="none")
    elif args.raw_velocity:
        config = replace(config, velocity_mode="raw")

    eve_model = None
    if config.velocity_mode == "compensated" and not args.oracle_velocity:
        if not args.eve_checkpoint:
            raise ValidationError(
                "compensated training needs --eve-checkpoint or --oracle-velocity")
        eve_model, _ = load_model(args.eve_checkpoint)
        if eve_model.kind != "eve":
            raise ValidationError("--eve-checkpoint is not a velocity model")

    train_seqs = load_split(config.data_dir, "train")
    val_seqs = load_split(config.data_dir, "val")
    result = train_mos(config, train_seqs, val_seqs, eve_model=eve_model,
                       progress=print if args.verbose else None)
    out = Path(args.out)
    save_model(out, result.model, epoch=result.best_epoch,
               extra={"val_miou": result.best_metric,
                      "velocity_mode": config.velocity_mode,
                      "oracle_velocity": bool(args.oracle_velocity)})
    curve_path = out.with_suffix(".curve.csv")
    curve_path.write_text(result.curve_csv(), encoding="utf-8")
    print(f"best val mIoU {result.best_metric:.2f} at epoch {result.best_epoch}; "
          f"checkpoint {out}, curve {curve_path}")
    return 0


def _cmd_eval(args) -> int:
    config = _experiment_config(args)
    if not args.eve_checkpoint or not args.mos_checkpoint:
        raise ValidationError("eval needs --eve-checkpoint and --mos-checkpoint")
    eve_model, _ = load_model(args.eve_checkpoint)
    mos_model, mos_meta = load_model(args.mos_checkpoint)
    if eve_model.kind != "eve" or mos_model.kind != "mos":
        raise ValidationError("checkpoint kinds do not match eval roles")
    seqs = load_split(config.data_dir, args.split)
    report = evaluate_repeated(eve_model, mos_model, seqs, config)
    print(report.table(), end="")
    if args.out:
        report.write(args.out)
        print(f"wrote {args.out}.txt and {args.out}.kv")
    return 0


def _cmd_baseline(args) -> int:
    config = _experiment_config(args)
    seqs = load_split(config.data_dir, args.split)
    if args.kind == "ransac":
        report = evaluate_ransac(seqs, config)
    elif args.kind == "icp":
        report = evaluate_icp(seqs, config)
    else:
        report = evaluate_threshold_mos(seqs, config, tau=args.tau,
                                        oracle_velocity=args.oracle_velocity)
    print(report.table(), end="")
    if args.out:
        report.write(args.out)
        print(f"wrote {args.out}.txt and {args.out}.kv")
    return 0


def _cmd_grad_check(args) -> int:
    from .checks import run_gradient_suite
    results = run_gradient_suite(seed=args.seed if args.seed is not None else 0)
    failed = 0
    for name, ok, err in results:
        print(f"{name:<24} {'pass' if ok else 'FAIL'}  max_rel_err={err:.3e}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed}/{len(results)} checks failed")
        return 2
    print(f"all {len(results)} gradient checks passed")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="radarmotion",
                     description="radar ego-velocity estimation and moving-object "
                                 "segmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--frame-rate", type=float, default=10.0)
    p.add_argument("--static", type=int, default=150)
    p.add_argument("--objects", type=int, default=3)
    p.add_argument("--object-points-min", type=int, default=5)
    p.add_argument("--object-points-max", type=int, default=30)
    p.add_argument("--object-speed-min", type=float, default=0.5)
    p.add_argument("--object-speed-max", type=float, default=3.0)
    p.add_argument("--ego-speed-min", type=float, default=1.0)
    p.add_argument("--ego-speed-max", type=float, default=5.0)
    p.add_argument("--velocity-noise", type=float, default=0.0)
    p.add_argument("--position-noise", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train-eve", help="train the ego-velocity model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs-eve", type=int, default=None, dest="epochs_eve")
    p.add_argument("--point-budget", type=int, default=None, dest="point_budget")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--time-gap", type=int, default=None, dest="time_gap")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train_eve)

    p = sub.add_parser("train-mos", help="train the segmentation model")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eve-checkpoint", type=str, default=None)
    p.add_argument("--oracle-velocity", action="store_true",
                   help="compensate with ground-truth speeds instead of a checkpoint")
    p.add_argument("--no-velocity", action="store_true",
                   help="ablation: zero the velocity channel")
    p.add_argument("--raw-velocity", action="store_true",
                   help="ablation: keep measured velocities uncompensated")
    p.add_argument("--epochs-mos", type=int, default=None, dest="epochs_mos")
    p.add_argument("--point-budget", type=int, default=None, dest="point_budget")
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--time-gap", type=int, default=None, dest="time_gap")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_train_mos)

    p = sub.add_parser("eval", help="evaluate checkpoints on a held-out split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--eve-checkpoint", type=str, default=None)
    p.add_argument("--mos-checkpoint", type=str, default=None)
    p.add_argument("--out", type=str, default=None, help="report path prefix")
    p.add_argument("--repeats", type=int, default=None,
                   help="average the report over this many seeds")
    p.add_argument("--point-budget", type=int, default=None, dest="point_budget")
    p.add_argument("--time-gap", type=int, default=None, dest="time_gap")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline", help="run a classical baseline")
    _add_common(p)
    p.add_argument("kind", choices=("ransac", "icp", "threshold"))
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--tau", type=float, default=0.25,
                   help="residual threshold for the threshold baseline")
    p.add_argument("--oracle-velocity", action="store_true",
                   help="compensate with ground-truth speeds")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--point-budget", type=int, default=None, dest="point_budget")
    p.add_argument("--time-gap", type=int, default=None, dest="time_gap")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("grad-check", help="run the gradient-check suite")
    _add_common(p)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
