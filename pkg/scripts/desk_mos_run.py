"""Desk-scale segmentation experiment: train the segmentation model with
oracle velocity compensation plus the two velocity ablations, then compare
against the residual-threshold baseline on the held-out split.

The three trainings are independent, so they run as concurrent worker
processes (single-threaded BLAS each).

Usage: python scripts/desk_mos_run.py [--epochs 20] [--out runs/mos]
"""

import argparse
import json
import multiprocessing as mp
import os
import time
from pathlib import Path

import numpy as np


def _train_variant(payload):
    """Worker: train one velocity-mode variant and evaluate it on the test split."""
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    mode, epochs, seed, budget = payload

    from radarmotion.geometry import mix_seed, random_subsample
    from radarmotion.metrics import compute_mos_metrics
    from radarmotion.network import PointPack
    from radarmotion.autodiff import no_grad
    from radarmotion.simulate import split_dataset
    from radarmotion.training import (
        ExperimentConfig,
        collect_pairs,
        prepare_mos_inputs,
        train_mos,
    )
    from radarmotion.simulate import build_desk_dataset

    sequences = build_desk_dataset(seed=seed, velocity_noise=0.2)
    train_seqs, val_seqs, test_seqs = split_dataset(sequences, (0.8, 0.1, 0.1), seed=seed)
    config = ExperimentConfig(point_budget=budget, batch_size=4, mos_epochs=epochs,
                              mos_decay_period=4, seed=seed, velocity_mode=mode)

    t0 = time.time()
    result = train_mos(config, train_seqs, val_seqs, eve_model=None)
    train_minutes = (time.time() - t0) / 60

    preds, trues = [], []
    test_pairs = collect_pairs(test_seqs, config.time_gap, config.min_frame_points)
    for pair in test_pairs:
        base = mix_seed(seed, pair.key(), 0x7E57)
        cur = random_subsample(pair.frame_t, budget, mix_seed(base, 1))
        prev = random_subsample(pair.frame_prev, budget, mix_seed(base, 2))
        c, p, lab = prepare_mos_inputs(pair, cur, prev, mode, None, base)
        with no_grad():
            logits = result.model.forward(PointPack([c]), PointPack([p]), seed=base)
        preds.append(logits.data.argmax(axis=1))
        trues.append(lab)
    scores = compute_mos_metrics(np.concatenate(preds), np.concatenate(trues))
    return mode, {
        "test_miou": scores["avg"].iou,
        "test_iou_moving": scores["moving"].iou,
        "val_miou": result.best_metric,
        "best_epoch": result.best_epoch,
        "train_minutes": train_minutes,
        "curve": result.curve,
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", type=str, default="runs/mos")
    ap.add_argument("--point-budget", type=int, default=256)
    ap.add_argument("--modes", nargs="+",
                    default=["compensated", "raw", "none"])
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    jobs = [(mode, args.epochs, args.seed, args.point_budget) for mode in args.modes]
    # one worker per variant: the runs are independent and timesharing all of
    # them beats a 2+1 schedule on small core counts
    with mp.get_context("spawn").Pool(processes=len(jobs)) as pool:
        results = dict(pool.map(_train_variant, jobs))
    wall_minutes = (time.time() - t0) / 60

    # threshold baseline with the same oracle compensation
    from radarmotion.simulate import build_desk_dataset, split_dataset
    from radarmotion.training import ExperimentConfig, evaluate_threshold_mos
    sequences = build_desk_dataset(seed=args.seed, velocity_noise=0.2)
    _, _, test_seqs = split_dataset(sequences, (0.8, 0.1, 0.1), seed=args.seed)
    config = ExperimentConfig(point_budget=args.point_budget, seed=args.seed)
    baseline = evaluate_threshold_mos(test_seqs, config, tau=0.25, oracle_velocity=True)

    summary = {
        "wall_minutes": wall_minutes,
        "baseline_threshold_miou": baseline.mos["avg"].iou,
        "variants": {m: {k: v for k, v in r.items() if k != "curve"}
                     for m, r in results.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    for mode, r in results.items():
        lines = ["epoch,loss,val_metric"]
        lines += [f"{e},{l!r},{m!r}" for e, l, m in r["curve"]]
        (out / f"mos_{mode}.curve.csv").write_text("\n".join(lines) + "\n",
                                                   encoding="utf-8")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
