"""Desk-scale velocity-estimation experiment: synthesize a labeled dataset,
train the velocity model, and compare against the RANSAC baseline on the
held-out split.

Usage: python scripts/desk_eve_run.py [--epochs 20] [--out runs/eve]
"""

import argparse
import json
import time
from pathlib import Path

import numpy as np

from radarmotion.geometry import mix_seed
from radarmotion.network import save_model
from radarmotion.simulate import build_desk_dataset, split_dataset
from radarmotion.training import (
    ExperimentConfig,
    evaluate_ransac,
    train_eve,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--out", type=str, default="runs/eve")
    ap.add_argument("--point-budget", type=int, default=256)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    sequences = build_desk_dataset(seed=args.seed)
    train_seqs, val_seqs, test_seqs = split_dataset(sequences, (0.8, 0.1, 0.1),
                                                    seed=args.seed)
    n_pairs = sum(len(s.frames) - 10 for _, s in sequences)
    print(f"dataset: {len(sequences)} sequences, {n_pairs} pairs "
          f"({len(train_seqs)}/{len(val_seqs)}/{len(test_seqs)} split) "
          f"[{time.time() - t0:.0f}s]", flush=True)

    config = ExperimentConfig(point_budget=args.point_budget, batch_size=4,
                              eve_epochs=args.epochs, eve_decay_period=7,
                              seed=args.seed)

    t1 = time.time()
    result = train_eve(config, train_seqs, val_seqs,
                       progress=lambda msg: print(f"[{time.time() - t1:7.0f}s] {msg}",
                                                  flush=True))
    train_time = time.time() - t1
    print(f"training done in {train_time / 60:.1f} min; "
          f"best val MAE {result.best_metric:.4f} @ epoch {result.best_epoch}", flush=True)

    save_model(out / "eve.ckpt", result.model, epoch=result.best_epoch)
    (out / "eve.curve.csv").write_text(result.curve_csv(), encoding="utf-8")

    from radarmotion.training import evaluate as _  # noqa: F401  (report helpers)
    from radarmotion.training import collect_pairs, _subsampled
    test_pairs = collect_pairs(test_seqs, config.time_gap, config.min_frame_points)
    errs = []
    for pair in test_pairs:
        cur, prev = _subsampled(pair, config.point_budget,
                                mix_seed(config.seed, 0x7E57))
        errs.append(abs(result.model.estimate(cur, prev, seed=pair.key())
                        - pair.frame_t.ego_v))
    test_mae = float(np.mean(errs))

    ransac_report = evaluate_ransac(test_seqs, config)
    summary = {
        "test_mae": test_mae,
        "ransac_mae": ransac_report.eve["mae"],
        "val_mae": result.best_metric,
        "train_minutes": train_time / 60,
        "epochs": args.epochs,
        "skipped_no_static": result.skipped_no_static,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary, indent=2), flush=True)


if __name__ == "__main__":
    main()
