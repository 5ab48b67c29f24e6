"""Segmentation and velocity metrics plus the evaluation report format.

Per class c: IoU = TP/(TP+FP+FN), F1 = 2TP/(2TP+FP+FN), and Acc is the
per-class recall TP/(TP+FN); a class absent from both prediction and truth
scores 100 (vacuously perfect). Velocity estimates report MAE, MSE and
precision@tau (strict |error| < tau). Reports serialize as an aligned
text table and as key=value lines, both byte-stable for a given input.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ClassScores",
    "MetricsReport",
    "compute_mos_metrics",
    "compute_eve_metrics",
    "config_hash",
]

CLASS_NAMES = ("static", "moving")


@dataclass(frozen=True)
class ClassScores:
    iou: float
    f1: float
    acc: float


def _scores_for_class(pred: np.ndarray, true: np.ndarray, cls: int) -> ClassScores:
    tp = int(((pred == cls) & (true == cls)).sum())
    fp = int(((pred == cls) & (true != cls)).sum())
    fn = int(((pred != cls) & (true == cls)).sum())
    iou = 100.0 * tp / (tp + fp + fn) if tp + fp + fn else 100.0
    f1 = 100.0 * 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 100.0
    acc = 100.0 * tp / (tp + fn) if tp + fn else 100.0
    return ClassScores(iou=iou, f1=f1, acc=acc)


def compute_mos_metrics(pred_labels, true_labels) -> dict[str, ClassScores]:
    """Per-class scores plus the unweighted average under key "avg"."""
    pred = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    true = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    if pred.size == 0 or true.size == 0:
        raise ValueError("metrics need at least one point")
    if pred.shape != true.shape:
        raise ValueError("prediction and truth lengths differ")
    per = {name: _scores_for_class(pred, true, c) for c, name in enumerate(CLASS_NAMES)}
    per["avg"] = ClassScores(
        iou=float(np.mean([per[n].iou for n in CLASS_NAMES])),
        f1=float(np.mean([per[n].f1 for n in CLASS_NAMES])),
        acc=float(np.mean([per[n].acc for n in CLASS_NAMES])),
    )
    return per


def compute_eve_metrics(estimates, truths, thresholds=(0.1, 0.3, 0.5)) -> dict:
    """MAE, MSE and the fraction of estimates within each threshold."""
    est = np.asarray(estimates, dtype=np.float64).reshape(-1)
    tru = np.asarray(truths, dtype=np.float64).reshape(-1)
    if est.size == 0:
        raise ValueError("metrics need at least one estimate")
    if est.shape != tru.shape:
        raise ValueError("estimate and truth lengths differ")
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must ascend")
    err = np.abs(est - tru)
    return {
        "mae": float(err.mean()),
        "mse": float((err ** 2).mean()),
        "precision": {float(t): float((err < t).mean()) for t in thresholds},
        "count": int(est.size),
    }


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricsReport:
    """One evaluation run: segmentation scores, velocity errors, counts."""

    mos: dict[str, ClassScores] | None = None
    eve: dict | None = None
    acc_overall: float | None = None
    n_points: int = 0
    n_pairs: int = 0
    cfg_hash: str = ""
    notes: dict = field(default_factory=dict)

    def validate(self):
        """Metric identities that must hold on every emitted report."""
        if self.mos is not None:
            for name in CLASS_NAMES:
                s = self.mos[name]
                for v in (s.iou, s.f1, s.acc):
                    if not 0.0 <= v <= 100.0:
                        raise ValueError(f"{name} score {v} outside [0, 100]")
                f1 = s.f1 / 100.0
                iou = s.iou / 100.0
                expect = f1 / (2.0 - f1) if f1 < 2.0 else 1.0
                if abs(iou - expect) > 1e-9:
                    raise ValueError(f"IoU/F1 identity violated for {name}")
        if self.eve is not None:
            taus = sorted(self.eve["precision"])
            precs = [self.eve["precision"][t] for t in taus]
            if any(b < a - 1e-12 for a, b in zip(precs, precs[1:])):
                raise ValueError("precision must be non-decreasing in the threshold")

    def kv_lines(self) -> list[str]:
        self.validate()
        lines = [f"config_hash={self.cfg_hash}",
                 f"n_pairs={self.n_pairs}",
                 f"n_points={self.n_points}"]
        if self.mos is not None:
            for name in (*CLASS_NAMES, "avg"):
                s = self.mos[name]
                lines.append(f"iou_{name}={s.iou!r}")
                lines.append(f"f1_{name}={s.f1!r}")
                lines.append(f"acc_{name}={s.acc!r}")
            if self.acc_overall is not None:
                lines.append(f"acc_overall={self.acc_overall!r}")
                lines.append(f"acc_macro={self.mos['avg'].acc!r}")
        if self.eve is not None:
            lines.append(f"eve_mae={self.eve['mae']!r}")
            lines.append(f"eve_mse={self.eve['mse']!r}")
            for t in sorted(self.eve["precision"]):
                lines.append(f"eve_precision_{t}={self.eve['precision'][t]!r}")
        for key in sorted(self.notes):
            lines.append(f"{key}={self.notes[key]}")
        return lines

    def table(self) -> str:
        self.validate()
        out = []
        if self.mos is not None:
            out.append(f"{'class':<10}{'IoU':>10}{'F1':>10}{'Acc':>10}")
            for name in (*CLASS_NAMES, "avg"):
                s = self.mos[name]
                out.append(f"{name:<10}{s.iou:>10.2f}{s.f1:>10.2f}{s.acc:>10.2f}")
            if self.acc_overall is not None:
                out.append(f"{'overall':<10}{'':>10}{'':>10}{self.acc_overall:>10.2f}")
        if self.eve is not None:
            if out:
                out.append("")
            out.append(f"velocity over {self.eve['count']} pairs")
            out.append(f"{'MAE':<16}{self.eve['mae']:.4f}")
            out.append(f"{'MSE':<16}{self.eve['mse']:.4f}")
            for t in sorted(self.eve["precision"]):
                out.append(f"precision@{t:<6g}{100 * self.eve['precision'][t]:>8.1f}%")
        out.append("")
        out.append(f"pairs={self.n_pairs} points={self.n_points} config={self.cfg_hash}")
        return "\n".join(out) + "\n"

    def write(self, prefix) -> None:
        """Persist ``<prefix>.txt`` and ``<prefix>.kv``."""
        from pathlib import Path
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        prefix.with_suffix(".txt").write_text(self.table(), encoding="utf-8")
        prefix.with_suffix(".kv").write_text("\n".join(self.kv_lines()) + "\n",
                                             encoding="utf-8")
