"""Ego-velocity and moving-object-segmentation networks.

Both models share the same encoder skeleton: an embedding MLP over the
4-channel points, object attention at full resolution, two farthest-point
transitions (each with object attention at the coarser resolution), scenario
attention at the bottleneck, and cross-frame attention fusing the current
frame with its predecessor. The velocity model pools the bottleneck into a
single forward-speed estimate; the segmentation model adds a U-shaped
decoder with skip connections back to per-point logits.

Frames are processed in packs: a batch of clouds concatenated row-wise with
per-frame neighbor indices offset into the pack, so one tape services the
whole batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    concat,
    gather_rows,
    load_checkpoint,
    save_checkpoint,
)
from .attention import Mlp, TransitionDown, TransitionUp, VectorAttentionLayer
from .geometry import (
    Compensated,
    RadarFrame,
    ball_query_all,
    farthest_point_sample,
    interval_sample_all,
    mix_seed,
    velocity_compensate,
)

__all__ = [
    "EveConfig",
    "MosConfig",
    "EveModel",
    "MosModel",
    "PointPack",
    "doppler_loss",
    "eve_loss",
    "mos_loss",
    "predict_pipeline",
    "PipelineResult",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class EveConfig:
    """Velocity-estimation network shape and sampling knobs."""

    point_budget: int = 512
    sampling_rates: tuple[int, ...] = (1, 4, 4, 1)
    stage_widths: tuple[int, ...] = (32, 64, 128, 128)
    ball_radii: tuple[float, ...] = (2.0, 4.0, 8.0)
    cross_radius: float = 10.0
    k: int = 16
    g: int = 2
    head_sizes: tuple[int, ...] = (256, 64, 1)
    time_gap: int = 10
    coord_scale: float = 0.1

    def __post_init__(self):
        if self.stage_widths[2] != self.stage_widths[3]:
            raise ValueError("bottleneck and fusion widths must agree")
        if self.head_sizes[-1] != 1:
            raise ValueError("velocity head must end in one output")

    @property
    def head_input_width(self) -> int:
        return self.stage_widths[-1]

    @property
    def stage_counts(self) -> tuple[int, ...]:
        counts = []
        n = self.point_budget
        for rate in self.sampling_rates:
            n //= rate
            counts.append(n)
        return tuple(counts)


@dataclass(frozen=True)
class MosConfig:
    """Segmentation network: encoder mirroring the velocity model plus a
    U-shaped decoder ending at a 32-wide per-point feature and 2 logits."""

    point_budget: int = 512
    sampling_rates: tuple[int, ...] = (1, 4, 4, 1)
    stage_widths: tuple[int, ...] = (32, 64, 128, 128)
    ball_radii: tuple[float, ...] = (2.0, 4.0, 8.0)
    cross_radius: float = 10.0
    k: int = 16
    g: int = 2
    decoder_widths: tuple[int, ...] = (64, 32)
    head_sizes: tuple[int, ...] = (32, 16, 2)
    time_gap: int = 10
    coord_scale: float = 0.1
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.head_sizes[-1] != 2:
            raise ValueError("segmentation head must end in 2 logits")
        if self.stage_widths[2] != self.stage_widths[3]:
            raise ValueError("bottleneck and fusion widths must agree")


def _config_to_dict(cfg) -> dict:
    return asdict(cfg)


def _config_from_dict(cls, d: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        val = d[f.name]
        kwargs[f.name] = tuple(val) if isinstance(val, list) else val
    return cls(**kwargs)


class PointPack:
    """A batch of frames concatenated row-wise."""

    def __init__(self, frames: list[RadarFrame]):
        if not frames or any(len(f) == 0 for f in frames):
            raise ValueError("packs require non-empty frames")
        self.frames = list(frames)
        self.xyz = np.concatenate([f.xyz for f in frames], axis=0)
        self.v = np.concatenate([f.v for f in frames])
        counts = [len(f) for f in frames]
        edges = np.concatenate([[0], np.cumsum(counts)])
        self.slices = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def input_features(self, coord_scale: float) -> np.ndarray:
        return np.column_stack([self.xyz * coord_scale, self.v])

    def self_ball_idx(self, radius: float, k: int, seed: int) -> np.ndarray:
        rows = []
        for frame, (a, _) in zip(self.frames, self.slices):
            rows.append(ball_query_all(frame.xyz, frame.xyz, radius, k, seed) + a)
        return np.concatenate(rows, axis=0)

    def self_interval_idx(self, g: int, k: int) -> np.ndarray:
        rows = []
        for frame, (a, _) in zip(self.frames, self.slices):
            rows.append(interval_sample_all(frame.xyz, frame.xyz, g, k) + a)
        return np.concatenate(rows, axis=0)

    def cross_ball_idx(self, other: "PointPack", radius: float, k: int, seed: int) -> np.ndarray:
        """Per-frame correspondence: frame i queries other.frame i."""
        if other.n_frames != self.n_frames:
            raise ValueError("cross pack frame counts differ")
        rows = []
        for (frame, (a, _)), (oframe, (oa, _)) in zip(
                zip(self.frames, self.slices), zip(other.frames, other.slices)):
            idx = ball_query_all(frame.xyz, oframe.xyz, radius, k, seed,
                                 allow_empty_fallback=True)
            rows.append(idx + oa)
        return np.concatenate(rows, axis=0)

    def fps_subpack(self, rate: int, seed: int) -> tuple["PointPack", np.ndarray]:
        """Farthest-point subsample every frame by ``rate``; returns the new
        pack and the selected rows as global indices into this pack."""
        subs, centers = [], []
        for frame, (a, _) in zip(self.frames, self.slices):
            target = len(frame) // rate
            if target < 1:
                raise ValueError(f"rate {rate} empties a {len(frame)}-point frame")
            sel = farthest_point_sample(frame, target, seed=seed)
            subs.append(frame.take(sel))
            centers.append(sel + a)
        return PointPack(subs), np.concatenate(centers)


class _Encoder:
    """Shared tower: embed, object attention, two transitions, scenario
    attention, then cross-frame fusion at the bottleneck."""

    def __init__(self, cfg, rng, name: str, cross_pos_depth: int):
        d1, d2, d3, d4 = cfg.stage_widths
        if d3 != d4:
            raise ValueError("bottleneck and fusion widths must agree")
        cs = cfg.coord_scale
        self.cfg = cfg
        self.embed = Mlp([4, d1, d1], rng, f"{name}.embed")
        self.oa1 = VectorAttentionLayer(d1, rng, f"{name}.oa1", coord_scale=cs)
        self.td1 = TransitionDown(d1, d2, rng, f"{name}.td1",
                                  radius=cfg.ball_radii[1], k=cfg.k, coord_scale=cs)
        self.td2 = TransitionDown(d2, d3, rng, f"{name}.td2",
                                  radius=cfg.ball_radii[2], k=cfg.k, coord_scale=cs)
        self.sa = VectorAttentionLayer(d3, rng, f"{name}.sa", coord_scale=cs)
        self.cross = VectorAttentionLayer(d4, rng, f"{name}.cross",
                                          pos_depth=cross_pos_depth, coord_scale=cs)

    def parameters(self) -> list[Parameter]:
        return (self.embed.parameters() + self.oa1.parameters() + self.td1.parameters()
                + self.td2.parameters() + self.sa.parameters() + self.cross.parameters())

    def tower(self, pack: PointPack, seed: int):
        """Intra-frame stages; returns per-resolution packs and features."""
        cfg = self.cfg
        rates = cfg.sampling_rates
        f0 = self.embed(Tensor(pack.input_features(cfg.coord_scale)))
        idx = pack.self_ball_idx(cfg.ball_radii[0], cfg.k, mix_seed(seed, 1))
        x1 = f0 + self.oa1.forward(f0, pack.xyz, f0, pack.xyz, idx)

        pack2, centers2 = pack.fps_subpack(rates[1], mix_seed(seed, 2))
        x2 = self._transition(self.td1, pack, x1, pack2, centers2, mix_seed(seed, 3))

        pack3, centers3 = pack2.fps_subpack(rates[2], mix_seed(seed, 4))
        x3_in = self._transition(self.td2, pack2, x2, pack3, centers3, mix_seed(seed, 5))

        idx3 = pack3.self_interval_idx(cfg.g, cfg.k)
        x3 = x3_in + self.sa.forward(x3_in, pack3.xyz, x3_in, pack3.xyz, idx3)
        return (pack, x1), (pack2, x2), (pack3, x3)

    def _transition(self, td: TransitionDown, pack: PointPack, feats: Tensor,
                    subpack: PointPack, centers: np.ndarray, seed: int) -> Tensor:
        from .autodiff import relu
        projected = relu(td.project(feats))
        idx = []
        for (frame, (a, _)), (sub, _) in zip(zip(pack.frames, pack.slices),
                                             zip(subpack.frames, subpack.slices)):
            idx.append(ball_query_all(sub.xyz, frame.xyz, td.radius, td.k,
                                      mix_seed(seed, 0x7D)) + a)
        idx = np.concatenate(idx, axis=0)
        centers_feats = gather_rows(projected, centers)
        return centers_feats + td.attend.forward(centers_feats, subpack.xyz,
                                                 projected, pack.xyz, idx)

    def fuse(self, cur: tuple[PointPack, Tensor], prev: tuple[PointPack, Tensor],
             seed: int) -> Tensor:
        pack_c, feats_c = cur
        pack_p, feats_p = prev
        idx = pack_c.cross_ball_idx(pack_p, self.cfg.cross_radius, self.cfg.k,
                                    mix_seed(seed, 6))
        # offset kv indices into the concatenated (prev) tensor directly
        return feats_c + self.cross.forward(feats_c, pack_c.xyz, feats_p, pack_p.xyz, idx)


def _segment_means(feats: Tensor, slices: list[tuple[int, int]]) -> Tensor:
    rows = [gather_rows(feats, np.arange(a, b)).mean(axis=0).reshape(1, -1)
            for a, b in slices]
    return concat(rows, axis=0)


class EveModel:
    """Forward-speed regressor over a pair of consecutive radar frames."""

    kind = "eve"

    def __init__(self, config: EveConfig = EveConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(mix_seed(seed, 0xE7E))
        self.encoder = _Encoder(config, rng, "eve", cross_pos_depth=2)
        d = config.head_input_width
        self.head = Mlp([d] + list(config.head_sizes), rng, "eve.head")
        self.seed = seed

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def backbone(self, cur: PointPack, prev: PointPack, seed: int) -> tuple[PointPack, Tensor]:
        """Bottleneck features for the current frames, fused with the previous."""
        *_, bott_c = self.encoder.tower(cur, mix_seed(seed, 10))
        *_, bott_p = self.encoder.tower(prev, mix_seed(seed, 11))
        fused = self.encoder.fuse(bott_c, bott_p, mix_seed(seed, 12))
        return bott_c[0], fused

    def head_forward(self, features: Tensor, slices: list[tuple[int, int]]) -> Tensor:
        """Global average pool per frame, then the velocity MLP; (B, 1)."""
        pooled = _segment_means(features, slices)
        return self.head(pooled)

    def forward(self, cur: PointPack, prev: PointPack, seed: int = 0) -> Tensor:
        pack, fused = self.backbone(cur, prev, seed)
        return self.head_forward(fused, pack.slices)

    def estimate(self, frame_t: RadarFrame, frame_prev: RadarFrame, seed: int = 0) -> float:
        from .autodiff import no_grad
        with no_grad():
            out = self.forward(PointPack([frame_t]), PointPack([frame_prev]), seed)
        return float(out.data[0, 0])


class MosModel:
    """Per-point moving/static classifier over a pair of radar frames."""

    kind = "mos"

    def __init__(self, config: MosConfig = MosConfig(), seed: int = 0):
        self.config = config
        rng = np.random.default_rng(mix_seed(seed, 0x305))
        self.encoder = _Encoder(config, rng, "mos", cross_pos_depth=3)
        d1, d2, d3, _ = config.stage_widths
        dec1, dec2 = config.decoder_widths
        cs = config.coord_scale
        self.tu1 = TransitionUp(d3, d2, dec1, rng, "mos.tu1")
        self.dec_sa = VectorAttentionLayer(dec1, rng, "mos.dec_sa", coord_scale=cs)
        self.tu2 = TransitionUp(dec1, d1, dec2, rng, "mos.tu2")
        self.dec_oa = VectorAttentionLayer(dec2, rng, "mos.dec_oa", coord_scale=cs)
        self.head = Mlp([dec2] + list(config.head_sizes), rng, "mos.head")
        self.seed = seed

    def parameters(self) -> list[Parameter]:
        return (self.encoder.parameters() + self.tu1.parameters() + self.dec_sa.parameters()
                + self.tu2.parameters() + self.dec_oa.parameters() + self.head.parameters())

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def backbone(self, cur: PointPack, prev: PointPack, seed: int) -> Tensor:
        """Per-point segmentation features (rows of ``cur``, decoder width)."""
        cfg = self.config
        (p1, x1), (p2, x2), (p3c, x3c) = self.encoder.tower(cur, mix_seed(seed, 20))
        *_, bott_p = self.encoder.tower(prev, mix_seed(seed, 21))
        fused = self.encoder.fuse((p3c, x3c), bott_p, mix_seed(seed, 22))

        up1 = self.tu1.forward(p3c.xyz, fused, p2.xyz, x2)
        idx_mid = p2.self_interval_idx(cfg.g, cfg.k)
        up1 = up1 + self.dec_sa.forward(up1, p2.xyz, up1, p2.xyz, idx_mid)

        up2 = self.tu2.forward(p2.xyz, up1, p1.xyz, x1)
        idx_fine = p1.self_ball_idx(cfg.ball_radii[0], cfg.k, mix_seed(seed, 23))
        return up2 + self.dec_oa.forward(up2, p1.xyz, up2, p1.xyz, idx_fine)

    def head_forward(self, features: Tensor) -> Tensor:
        """Per-point 2-class logits."""
        return self.head(features)

    def forward(self, cur: PointPack, prev: PointPack, seed: int = 0) -> Tensor:
        return self.head_forward(self.backbone(cur, prev, seed))

    def predict_labels(self, frame_t: RadarFrame, frame_prev: RadarFrame,
                       seed: int = 0) -> np.ndarray:
        from .autodiff import no_grad
        with no_grad():
            logits = self.forward(PointPack([frame_t]), PointPack([frame_prev]), seed)
        return logits.data.argmax(axis=1)


# losses -----------------------------------------------------------------------


def _as_tensor_scalar(v) -> Tensor:
    if isinstance(v, Tensor):
        return v.reshape(()) if v.data.ndim else v
    return Tensor(float(v))


def doppler_loss(v_hat, static_frame: RadarFrame) -> Tensor:
    """Mean L1 gap between the projected speed estimate and the measured
    radial velocities of static points."""
    if len(static_frame) == 0:
        raise ValueError("doppler loss undefined on an empty static set")
    xyz = static_frame.xyz
    norm = np.sqrt((xyz ** 2).sum(axis=1))
    if (norm == 0).any():
        raise ValueError("static set contains a zero-norm point")
    coef = xyz[:, 1] / norm
    vh = _as_tensor_scalar(v_hat)
    return (vh * Tensor(coef) - Tensor(static_frame.v)).abs().mean()


def eve_loss(v_hat, v_true: float, static_frame: RadarFrame) -> Tensor:
    """Doppler loss plus the squared error against the ground-truth speed."""
    vh = _as_tensor_scalar(v_hat)
    err = vh - Tensor(float(v_true))
    return doppler_loss(vh, static_frame) + err * err


def mos_loss(logits: Tensor, labels: np.ndarray, class_weights=(1.0, 1.0)) -> Tensor:
    """Weighted cross-entropy averaged over points."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must align with logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("labels out of class range")
    w = np.asarray(class_weights, dtype=np.float64)
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    shift = Tensor(logits.data.max(axis=1, keepdims=True))  # detached, exact
    z = logits - shift
    log_norm = z.exp().sum(axis=1, keepdims=True).log()
    log_probs = z - log_norm
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = (log_probs * Tensor(onehot)).sum(axis=1)
    return (Tensor(w[labels]) * -picked).mean()


# end-to-end -------------------------------------------------------------------


@dataclass
class PipelineResult:
    v_hat: float
    labels: np.ndarray
    compensated_t: Compensated
    compensated_prev: Compensated


def predict_pipeline(eve_model: EveModel, mos_model: MosModel,
                     frame_t: RadarFrame, frame_prev: RadarFrame,
                     seed: int = 0) -> PipelineResult:
    """Estimate ego speed, compensate both frames with it, then segment.

    Labels are returned in ``frame_t`` order; points dropped by
    compensation (degenerate x=y=0 geometry) default to static.
    """
    if len(frame_t) == 0 or len(frame_prev) == 0:
        raise ValueError("pipeline frames must be non-empty")
    v_hat = eve_model.estimate(frame_t, frame_prev, seed=seed)
    comp_t = velocity_compensate(v_hat, frame_t)
    comp_prev = velocity_compensate(v_hat, frame_prev)
    kept_labels = mos_model.predict_labels(comp_t.frame, comp_prev.frame,
                                           seed=mix_seed(seed, 30))
    labels = np.zeros(len(frame_t), dtype=np.int64)
    labels[comp_t.kept] = kept_labels
    return PipelineResult(v_hat=v_hat, labels=labels,
                          compensated_t=comp_t, compensated_prev=comp_prev)


# checkpointing ----------------------------------------------------------------

_CONFIG_CLASSES = {"eve": EveConfig, "mos": MosConfig}
_MODEL_CLASSES = {"eve": EveModel, "mos": MosModel}


def save_model(path, model, epoch: int = 0, extra: dict | None = None):
    meta = {
        "kind": model.kind,
        "config": _config_to_dict(model.config),
        "epoch": epoch,
        "seed": model.seed,
    }
    if extra:
        meta["extra"] = extra
    arrays = {name: p.data for name, p in model.named_parameters().items()}
    save_checkpoint(path, arrays, meta)


def load_model(path):
    meta, arrays = load_checkpoint(path)
    kind = meta.get("kind")
    if kind not in _MODEL_CLASSES:
        raise ValueError(f"unknown model kind {kind!r} in checkpoint")
    config = _config_from_dict(_CONFIG_CLASSES[kind], meta["config"])
    model = _MODEL_CLASSES[kind](config, seed=meta.get("seed", 0))
    params = model.named_parameters()
    if set(params) != set(arrays):
        raise ValueError("checkpoint parameter names do not match the model")
    for name, p in params.items():
        if p.data.shape != arrays[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        p.data = arrays[name].copy()
    return model, meta
