"""Training loops, dataset plumbing, and the evaluation protocol.

Datasets live on disk as one directory per sequence plus a ``manifest.csv``
assigning each sequence to train/val/test. Training pairs are (t-a, t)
frames from one sequence; every frame is subsampled to the point budget
with a seed keyed to (run seed, sequence, frame), so reruns are
byte-identical. The velocity model trains first; the segmentation model
trains on velocity-compensated clouds (from a checkpoint or from the
ground-truth oracle) or on raw/zeroed velocities for ablations.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import Adam, LrSchedule, no_grad
from .baselines import DegenerateSceneError, RansacConfig, ransac_eve
from .geometry import RadarFrame, mix_seed, random_subsample, velocity_compensate
from .metrics import MetricsReport, compute_eve_metrics, compute_mos_metrics, config_hash
from .network import (
    EveConfig,
    EveModel,
    MosConfig,
    MosModel,
    PointPack,
    doppler_loss,
    eve_loss,
    mos_loss,
    predict_pipeline,
)
from .simulate import LabeledSequence, read_sequence

__all__ = [
    "ExperimentConfig",
    "ValidationError",
    "FramePair",
    "load_manifest",
    "load_split",
    "collect_pairs",
    "train_eve",
    "train_mos",
    "evaluate",
    "TrainResult",
]

VELOCITY_MODES = ("compensated", "raw", "none")


class ValidationError(ValueError):
    """Bad configuration or dataset preconditions; CLI exit code 1."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment knobs; mirrors the key=value config file format."""

    data_dir: str = "dataset"
    point_budget: int = 512
    time_gap: int = 10
    batch_size: int = 4
    eve_epochs: int = 60
    mos_epochs: int = 50
    lr: float = 0.001
    lr_decay_ratio: float = 0.5
    eve_decay_period: int = 20
    mos_decay_period: int = 10
    weight_decay: float = 0.001
    k: int = 16
    g: int = 2
    ball_radius: float = 2.0
    cross_radius: float = 10.0
    stage_widths: tuple[int, ...] = (32, 64, 128, 128)
    decoder_widths: tuple[int, ...] = (64, 32)
    coord_scale: float = 0.1
    seed: int = 0
    precision_thresholds: tuple[float, ...] = (0.1, 0.3, 0.5)
    velocity_mode: str = "compensated"
    repeats: int = 1
    min_frame_points: int = 8

    def __post_init__(self):
        for name in ("point_budget", "time_gap", "batch_size", "eve_epochs",
                     "mos_epochs", "eve_decay_period", "mos_decay_period",
                     "k", "g", "repeats"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if tuple(self.precision_thresholds) != tuple(sorted(self.precision_thresholds)):
            raise ValidationError("precision thresholds must ascend")
        if self.velocity_mode not in VELOCITY_MODES:
            raise ValidationError(f"velocity_mode must be one of {VELOCITY_MODES}")

    def eve_config(self) -> EveConfig:
        return EveConfig(point_budget=self.point_budget,
                         stage_widths=tuple(self.stage_widths),
                         ball_radii=self._radii(), cross_radius=self.cross_radius,
                         k=self.k, g=self.g, time_gap=self.time_gap,
                         coord_scale=self.coord_scale)

    def mos_config(self) -> MosConfig:
        return MosConfig(point_budget=self.point_budget,
                         stage_widths=tuple(self.stage_widths),
                         ball_radii=self._radii(), cross_radius=self.cross_radius,
                         k=self.k, g=self.g, decoder_widths=tuple(self.decoder_widths),
                         time_gap=self.time_gap, coord_scale=self.coord_scale)

    def _radii(self) -> tuple[float, float, float]:
        r = self.ball_radius
        return (r, 2.0 * r, 4.0 * r)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_TUPLE_FIELDS = {"stage_widths": int, "decoder_widths": int, "precision_thresholds": float}


def config_from_file(path, **overrides) -> ExperimentConfig:
    """Parse a flat ``key=value`` config file."""
    known = {f.name: f for f in fields(ExperimentConfig)}
    kwargs: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
            kwargs[key] = _coerce(key, raw, path, lineno)
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)


def _coerce(key: str, raw: str, path, lineno: int):
    if key in _TUPLE_FIELDS:
        cast = _TUPLE_FIELDS[key]
        try:
            return tuple(cast(part.strip()) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: bad list for {key}") from None
    default = getattr(ExperimentConfig(), key)
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: bad value for {key}") from None
    return raw


# dataset on disk ---------------------------------------------------------------


def load_manifest(data_dir) -> dict[str, list[str]]:
    """Read ``manifest.csv`` (header ``split,sequence``); refuse overlaps."""
    path = Path(data_dir) / "manifest.csv"
    if not path.exists():
        raise ValidationError(f"missing manifest: {path}")
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    seen: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "split,sequence":
            raise ValidationError(f"{path}:1: bad manifest header")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{lineno}: expected split,sequence")
            split, name = parts
            if split not in splits:
                raise ValidationError(f"{path}:{lineno}: unknown split {split!r}")
            if name in seen:
                raise ValidationError(
                    f"{path}:{lineno}: sequence {name!r} already in split {seen[name]!r}")
            seen[name] = split
            splits[split].append(name)
    return splits


def load_split(data_dir, split: str) -> list[tuple[str, LabeledSequence]]:
    manifest = load_manifest(data_dir)
    out = []
    for name in manifest[split]:
        out.append((name, read_sequence(Path(data_dir) / name)))
    return out


@dataclass(frozen=True)
class FramePair:
    sequence: str
    t: int
    frame_t: RadarFrame
    frame_prev: RadarFrame

    def key(self) -> int:
        # crc32 keeps the key stable across processes (str hash is salted)
        return mix_seed(zlib.crc32(self.sequence.encode("utf-8")), self.t)


def collect_pairs(sequences: list[tuple[str, LabeledSequence]], time_gap: int,
                  min_points: int) -> list[FramePair]:
    pairs = []
    for name, seq in sequences:
        for t in range(time_gap, len(seq.frames)):
            cur, prev = seq.frames[t], seq.frames[t - time_gap]
            if len(cur) >= min_points and len(prev) >= min_points:
                pairs.append(FramePair(sequence=name, t=t, frame_t=cur, frame_prev=prev))
    return pairs


def _subsampled(pair: FramePair, budget: int, seed: int) -> tuple[RadarFrame, RadarFrame]:
    base = mix_seed(seed, pair.key())
    return (random_subsample(pair.frame_t, budget, mix_seed(base, 1)),
            random_subsample(pair.frame_prev, budget, mix_seed(base, 2)))


def _require_labels_and_ego(pairs: list[FramePair], need_ego: bool):
    for p in pairs[:50]:
        if p.frame_t.labels is None:
            raise ValidationError(f"sequence {p.sequence} lacks labels")
        if need_ego and p.frame_t.ego_v is None:
            raise ValidationError(f"sequence {p.sequence} lacks ego velocity")


@dataclass
class TrainResult:
    model: object
    curve: list[tuple[int, float, float]]  # epoch, train loss, val metric
    best_epoch: int
    best_metric: float
    skipped_no_static: int = 0

    def curve_csv(self) -> str:
        lines = ["epoch,loss,val_metric"]
        lines += [f"{e},{l!r},{m!r}" for e, l, m in self.curve]
        return "\n".join(lines) + "\n"


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters().items()}


def _restore(model, snap: dict[str, np.ndarray]):
    for name, p in model.named_parameters().items():
        p.data = snap[name].copy()


# velocity training ---------------------------------------------------------------


def train_eve(config: ExperimentConfig, train_seqs, val_seqs,
              progress=None) -> TrainResult:
    """Adam over the Doppler + squared-error loss; best-val-MAE checkpoint."""
    pairs = collect_pairs(train_seqs, config.time_gap, config.min_frame_points)
    val_pairs = collect_pairs(val_seqs, config.time_gap, config.min_frame_points)
    if not pairs or not val_pairs:
        raise ValidationError("need non-empty train and val pair sets")
    _require_labels_and_ego(pairs, need_ego=True)

    model = EveModel(config.eve_config(), seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, config.lr_decay_ratio, config.eve_decay_period)

    curve = []
    skipped = 0
    best = (float("inf"), -1, None)
    for epoch in range(config.eve_epochs):
        opt.lr = sched.rate(epoch)
        order = np.random.default_rng(mix_seed(config.seed, 0xE90C4, epoch)).permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            entries = []
            for pair in batch:
                cur, prev = _subsampled(pair, config.point_budget,
                                        mix_seed(config.seed, epoch))
                static = cur.take(np.nonzero(cur.labels == 0)[0])
                if len(static) == 0:
                    skipped += 1
                    continue
                entries.append((cur, prev, static, pair.frame_t.ego_v))
            if not entries:
                continue
            pack_cur = PointPack([e[0] for e in entries])
            pack_prev = PointPack([e[1] for e in entries])
            v_hat = model.forward(pack_cur, pack_prev,
                                  seed=mix_seed(config.seed, epoch, start))
            total = None
            for i, (_, _, static, ego_v) in enumerate(entries):
                term = eve_loss(_row(v_hat, i), ego_v, static)
                total = term if total is None else total + term
            loss = total * (1.0 / len(entries))
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())

        val_mae = _eve_val_mae(model, val_pairs, config)
        curve.append((epoch, float(np.mean(losses)) if losses else float("nan"), val_mae))
        if progress:
            progress(f"eve epoch {epoch}: loss={curve[-1][1]:.4f} val_mae={val_mae:.4f}")
        if val_mae < best[0]:
            best = (val_mae, epoch, _snapshot(model))

    if best[2] is not None:
        _restore(model, best[2])
    return TrainResult(model=model, curve=curve, best_epoch=best[1],
                       best_metric=best[0], skipped_no_static=skipped)


def _row(v_hat, i):
    from .autodiff import gather_rows
    return gather_rows(v_hat, [i]).reshape(())


def _eve_val_mae(model: EveModel, val_pairs, config: ExperimentConfig) -> float:
    errs = []
    chunk = 8
    for start in range(0, len(val_pairs), chunk):
        group = val_pairs[start:start + chunk]
        subs = [_subsampled(p, config.point_budget, mix_seed(config.seed, 0xA11))
                for p in group]
        with no_grad():
            out = model.forward(PointPack([s[0] for s in subs]),
                                PointPack([s[1] for s in subs]),
                                seed=mix_seed(config.seed, 0xA12, start))
        errs.extend(abs(float(v) - p.frame_t.ego_v)
                    for v, p in zip(out.data[:, 0], group))
    return float(np.mean(errs))


# segmentation training ------------------------------------------------------------


def prepare_mos_inputs(pair: FramePair, cur: RadarFrame, prev: RadarFrame,
                       mode: str, eve_model: EveModel | None,
                       seed: int) -> tuple[RadarFrame, RadarFrame, np.ndarray]:
    """Apply the velocity mode; returns (cur, prev, labels for cur rows)."""
    labels = cur.labels
    if mode == "none":
        return cur.with_velocity(np.zeros(len(cur))), \
            prev.with_velocity(np.zeros(len(prev))), labels
    if mode == "raw":
        return cur, prev, labels
    if eve_model is not None:
        v_hat = eve_model.estimate(cur, prev, seed=seed)
    else:
        v_hat = cur.ego_v
        if v_hat is None:
            raise ValidationError("oracle compensation requires ego velocity labels")
    comp_cur = velocity_compensate(v_hat, cur)
    comp_prev = velocity_compensate(v_hat, prev)
    return comp_cur.frame, comp_prev.frame, labels[comp_cur.kept]


def inverse_frequency_weights(pairs: list[FramePair]) -> tuple[float, float]:
    """Inverse class frequency over the training points, mean renormalized to 1."""
    counts = np.zeros(2)
    for p in pairs:
        counts += np.bincount(p.frame_t.labels, minlength=2)[:2]
    counts = np.maximum(counts, 1.0)
    inv = counts.sum() / counts
    inv = inv / inv.mean()
    return (float(inv[0]), float(inv[1]))


def train_mos(config: ExperimentConfig, train_seqs, val_seqs,
              eve_model: EveModel | None = None, progress=None) -> TrainResult:
    """Weighted cross-entropy over per-point logits; best-val-mIoU checkpoint.

    ``eve_model=None`` with mode "compensated" uses ground-truth speeds
    (the oracle-velocity ablation).
    """
    mode = config.velocity_mode
    pairs = collect_pairs(train_seqs, config.time_gap, config.min_frame_points)
    val_pairs = collect_pairs(val_seqs, config.time_gap, config.min_frame_points)
    if not pairs or not val_pairs:
        raise ValidationError("need non-empty train and val pair sets")
    _require_labels_and_ego(pairs, need_ego=(mode == "compensated" and eve_model is None))

    weights = inverse_frequency_weights(pairs)
    model = MosModel(replace(config.mos_config(), class_weights=weights),
                     seed=config.seed)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = LrSchedule(config.lr, config.lr_decay_ratio, config.mos_decay_period)

    curve = []
    best = (-1.0, -1, None)
    for epoch in range(config.mos_epochs):
        opt.lr = sched.rate(epoch)
        order = np.random.default_rng(mix_seed(config.seed, 0x305C4, epoch)).permutation(len(pairs))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [pairs[i] for i in order[start:start + config.batch_size]]
            curs, prevs, labels = [], [], []
            for pair in batch:
                cur, prev = _subsampled(pair, config.point_budget,
                                        mix_seed(config.seed, epoch, 0x305))
                c, p, lab = prepare_mos_inputs(pair, cur, prev, mode, eve_model,
                                               seed=mix_seed(config.seed, pair.key()))
                if len(c) == 0 or len(p) == 0:
                    continue
                curs.append(c)
                prevs.append(p)
                labels.append(lab)
            if not curs:
                continue
            logits = model.forward(PointPack(curs), PointPack(prevs),
                                   seed=mix_seed(config.seed, epoch, start, 2))
            loss = mos_loss(logits, np.concatenate(labels), weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())

        val_miou = _mos_val_miou(model, val_pairs, config, eve_model)
        curve.append((epoch, float(np.mean(losses)) if losses else float("nan"), val_miou))
        if progress:
            progress(f"mos epoch {epoch}: loss={curve[-1][1]:.4f} val_miou={val_miou:.2f}")
        if val_miou > best[0]:
            best = (val_miou, epoch, _snapshot(model))

    if best[2] is not None:
        _restore(model, best[2])
    return TrainResult(model=model, curve=curve, best_epoch=best[1], best_metric=best[0])


def _mos_val_miou(model: MosModel, val_pairs, config: ExperimentConfig,
                  eve_model: EveModel | None) -> float:
    preds, trues = [], []
    chunk = 8
    for start in range(0, len(val_pairs), chunk):
        group = val_pairs[start:start + chunk]
        curs, prevs, labs = [], [], []
        for pair in group:
            cur, prev = _subsampled(pair, config.point_budget, mix_seed(config.seed, 0xB22))
            c, p, lab = prepare_mos_inputs(pair, cur, prev, config.velocity_mode,
                                           eve_model, seed=mix_seed(config.seed, pair.key()))
            if len(c) == 0 or len(p) == 0:
                continue
            curs.append(c)
            prevs.append(p)
            labs.append(lab)
        if not curs:
            continue
        with no_grad():
            logits = model.forward(PointPack(curs), PointPack(prevs),
                                   seed=mix_seed(config.seed, 0xB23, start))
        preds.append(logits.data.argmax(axis=1))
        trues.append(np.concatenate(labs))
    if not preds:
        return 0.0
    return compute_mos_metrics(np.concatenate(preds), np.concatenate(trues))["avg"].iou


# evaluation -----------------------------------------------------------------------


def evaluate(eve_model: EveModel, mos_model: MosModel,
             eval_seqs, config: ExperimentConfig, seed: int | None = None) -> MetricsReport:
    """Run the full pipeline on a held-out split and aggregate the metrics."""
    run_seed = config.seed if seed is None else seed
    pairs = collect_pairs(eval_seqs, config.time_gap, config.min_frame_points)
    if not pairs:
        raise ValidationError("evaluation split has no usable frame pairs")
    estimates, truths = [], []
    preds, trues = [], []
    for pair in pairs:
        base = mix_seed(run_seed, pair.key())
        cur = random_subsample(pair.frame_t, config.point_budget, mix_seed(base, 1))
        prev = random_subsample(pair.frame_prev, config.point_budget, mix_seed(base, 2))
        result = predict_pipeline(eve_model, mos_model, cur, prev, seed=base)
        if pair.frame_t.ego_v is not None:
            estimates.append(result.v_hat)
            truths.append(pair.frame_t.ego_v)
        if cur.labels is not None:
            preds.append(result.labels)
            trues.append(cur.labels)

    report = MetricsReport(n_pairs=len(pairs),
                           cfg_hash=config_hash(config.as_dict()))
    if preds:
        pred = np.concatenate(preds)
        true = np.concatenate(trues)
        report.mos = compute_mos_metrics(pred, true)
        report.acc_overall = float(100.0 * (pred == true).mean())
        report.n_points = int(pred.size)
    if estimates:
        report.eve = compute_eve_metrics(estimates, truths, config.precision_thresholds)
    report.validate()
    return report


def evaluate_repeated(eve_model, mos_model, eval_seqs, config: ExperimentConfig) -> MetricsReport:
    """Average metric fields over ``config.repeats`` seeds."""
    reports = [evaluate(eve_model, mos_model, eval_seqs, config,
                        seed=mix_seed(config.seed, rep))
               for rep in range(config.repeats)]
    if len(reports) == 1:
        return reports[0]
    from .metrics import ClassScores
    base = reports[0]
    avg = MetricsReport(n_pairs=base.n_pairs, n_points=base.n_points,
                        cfg_hash=base.cfg_hash,
                        notes={"repeats": len(reports)})
    if base.mos is not None:
        avg.mos = {}
        for name in ("static", "moving", "avg"):
            avg.mos[name] = ClassScores(
                iou=float(np.mean([r.mos[name].iou for r in reports])),
                f1=float(np.mean([r.mos[name].f1 for r in reports])),
                acc=float(np.mean([r.mos[name].acc for r in reports])),
            )
        avg.acc_overall = float(np.mean([r.acc_overall for r in reports]))
    if base.eve is not None:
        avg.eve = {
            "mae": float(np.mean([r.eve["mae"] for r in reports])),
            "mse": float(np.mean([r.eve["mse"] for r in reports])),
            "precision": {t: float(np.mean([r.eve["precision"][t] for r in reports]))
                          for t in base.eve["precision"]},
            "count": base.eve["count"],
        }
    return avg


# baseline evaluation ---------------------------------------------------------------


def evaluate_ransac(eval_seqs, config: ExperimentConfig,
                    ransac: RansacConfig | None = None) -> MetricsReport:
    pairs = collect_pairs(eval_seqs, config.time_gap, config.min_frame_points)
    if not pairs:
        raise ValidationError("no usable frame pairs")
    rconf = ransac or RansacConfig(seed=config.seed)
    estimates, truths, failures = [], [], 0
    for pair in pairs:
        cur = random_subsample(pair.frame_t, config.point_budget,
                               mix_seed(config.seed, pair.key(), 1))
        try:
            estimates.append(ransac_eve(cur, rconf))
            truths.append(pair.frame_t.ego_v)
        except DegenerateSceneError:
            failures += 1
    if not estimates:
        raise ValidationError("RANSAC failed on every frame")
    report = MetricsReport(n_pairs=len(pairs), cfg_hash=config_hash(config.as_dict()),
                           eve=compute_eve_metrics(estimates, truths,
                                                   config.precision_thresholds),
                           notes={"degenerate_frames": failures})
    report.validate()
    return report


def evaluate_icp(eval_seqs, config: ExperimentConfig) -> MetricsReport:
    from .baselines import icp_velocity
    pairs = collect_pairs(eval_seqs, config.time_gap, config.min_frame_points)
    if not pairs:
        raise ValidationError("no usable frame pairs")
    estimates, truths = [], []
    for pair in pairs:
        dt = pair.frame_t.timestamp - pair.frame_prev.timestamp
        if dt <= 0:
            continue
        cur = random_subsample(pair.frame_t, config.point_budget,
                               mix_seed(config.seed, pair.key(), 1))
        prev = random_subsample(pair.frame_prev, config.point_budget,
                                mix_seed(config.seed, pair.key(), 2))
        estimates.append(icp_velocity(prev, cur, dt).velocity)
        truths.append(pair.frame_t.ego_v)
    report = MetricsReport(n_pairs=len(pairs), cfg_hash=config_hash(config.as_dict()),
                           eve=compute_eve_metrics(estimates, truths,
                                                   config.precision_thresholds))
    report.validate()
    return report


def evaluate_threshold_mos(eval_seqs, config: ExperimentConfig, tau: float = 0.25,
                           oracle_velocity: bool = False) -> MetricsReport:
    """Classical pipeline: RANSAC (or oracle) speed, compensate, threshold."""
    from .baselines import threshold_mos
    pairs = collect_pairs(eval_seqs, config.time_gap, config.min_frame_points)
    if not pairs:
        raise ValidationError("no usable frame pairs")
    preds, trues, failures = [], [], 0
    for pair in pairs:
        cur = random_subsample(pair.frame_t, config.point_budget,
                               mix_seed(config.seed, pair.key(), 1))
        if oracle_velocity:
            v_hat = cur.ego_v
        else:
            try:
                v_hat = ransac_eve(cur, RansacConfig(seed=config.seed))
            except DegenerateSceneError:
                failures += 1
                continue
        comp = velocity_compensate(v_hat, cur)
        preds.append(threshold_mos(comp.frame, tau))
        trues.append(cur.labels[comp.kept])
    if not preds:
        raise ValidationError("threshold baseline produced no predictions")
    pred = np.concatenate(preds)
    true = np.concatenate(trues)
    report = MetricsReport(n_pairs=len(pairs), n_points=int(pred.size),
                           cfg_hash=config_hash(config.as_dict()),
                           mos=compute_mos_metrics(pred, true),
                           acc_overall=float(100.0 * (pred == true).mean()),
                           notes={"tau": tau, "degenerate_frames": failures})
    report.validate()
    return report
