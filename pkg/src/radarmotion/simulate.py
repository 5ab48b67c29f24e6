"""Kinematic radar scene simulator and the sequence file format.

Scenes hold static background scatterers plus rigid clusters that move
with constant world velocity. The ego platform translates along +y at a
per-frame speed profile; each frame reports the scatterers inside the
field of view in ego coordinates, with the measured radial velocity

    v = (ego_v - object_v) . p / ||p||    (+ Gaussian noise)

so a static point ahead of a forward-moving platform reads positive.
Everything is a pure function of the config seed.

Sequences persist as one directory per sequence:

    points.csv   frame_idx,point_idx,x,y,z,v,label
    ego.csv      frame_idx,timestamp,ego_v

written with round-trip float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import RadarFrame, mix_seed

__all__ = [
    "SceneConfig",
    "ObjectTrack",
    "LabeledSequence",
    "ParseError",
    "measure_point",
    "simulate_sequence",
    "write_sequence",
    "read_sequence",
    "split_dataset",
]


class ParseError(ValueError):
    """Malformed sequence file; message carries the offending line number."""


@dataclass(frozen=True)
class SceneConfig:
    """Knobs for one simulated sequence."""

    n_static: int = 150
    n_objects: int = 3
    object_points: tuple[int, int] = (5, 30)
    object_speed: tuple[float, float] = (0.5, 3.0)
    object_extent: tuple[float, float] = (0.5, 2.5)
    ego_speed: float | tuple[float, ...] = 2.0
    fov_x: tuple[float, float] = (-30.0, 30.0)
    fov_y: tuple[float, float] = (2.0, 60.0)
    fov_z: tuple[float, float] = (-2.0, 2.0)
    velocity_noise: float = 0.0
    position_noise: float = 0.0
    dropout: float = 0.0
    n_frames: int = 30
    frame_rate: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.velocity_noise < 0 or self.position_noise < 0:
            raise ValueError("noise sigmas must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.n_frames < 1 or self.frame_rate <= 0:
            raise ValueError("need at least one frame and a positive rate")
        profile = self.ego_profile()
        if not np.isfinite(profile).all():
            raise ValueError("ego speeds must be finite")

    def ego_profile(self) -> np.ndarray:
        """Per-frame ego speed; scalars broadcast, short profiles hold the
        last value."""
        if np.isscalar(self.ego_speed):
            return np.full(self.n_frames, float(self.ego_speed))
        prof = np.asarray(self.ego_speed, dtype=np.float64)
        if prof.size >= self.n_frames:
            return prof[: self.n_frames].copy()
        return np.concatenate([prof, np.full(self.n_frames - prof.size, prof[-1])])


@dataclass
class ObjectTrack:
    object_id: int
    positions: np.ndarray  # (n_frames, 3) world coordinates of the cluster center
    velocities: np.ndarray  # (n_frames, 3) world velocity
    extent: float
    kind: str  # "static" | "moving"


@dataclass
class LabeledSequence:
    """Frames with labels and ego speed filled, plus generation metadata."""

    frames: list[RadarFrame]
    tracks: list[ObjectTrack] = field(default_factory=list)
    config: SceneConfig | None = None

    def __len__(self) -> int:
        return len(self.frames)


def measure_point(ego_v: np.ndarray, object_v: np.ndarray, p: np.ndarray,
                  sigma: float, rng: np.random.Generator | None = None) -> float:
    """Radial velocity of a scatterer at ego-frame position ``p``."""
    p = np.asarray(p, dtype=np.float64)
    norm = np.linalg.norm(p)
    if norm == 0.0:
        raise ValueError("cannot measure a zero-norm position")
    rel = np.asarray(ego_v, dtype=np.float64) - np.asarray(object_v, dtype=np.float64)
    v = float(rel @ (p / norm))
    if sigma > 0.0:
        if rng is None:
            raise ValueError("noise requires an RNG")
        v += float(rng.normal(0.0, sigma))
    return v


def _measure_batch(ego_v: np.ndarray, object_v: np.ndarray, p: np.ndarray,
                   sigma: float, rng: np.random.Generator) -> np.ndarray:
    norms = np.linalg.norm(p, axis=1)
    rel = ego_v[None, :] - object_v
    v = (rel * p).sum(axis=1) / norms
    if sigma > 0.0:
        v = v + rng.normal(0.0, sigma, size=v.size)
    return v


def simulate_sequence(config: SceneConfig) -> LabeledSequence:
    """Generate one labeled sequence; bitwise reproducible given the seed."""
    if config.n_static + config.n_objects == 0:
        raise ValueError("scene needs at least one scatterer")
    rng = np.random.default_rng(mix_seed(config.seed, 0x5CE4E))
    profile = config.ego_profile()
    dt = 1.0 / config.frame_rate
    ego_y = np.concatenate([[0.0], np.cumsum(profile[:-1]) * dt])
    total_advance = float(ego_y[-1])

    (x0, x1), (y0, y1), (z0, z1) = config.fov_x, config.fov_y, config.fov_z
    world_y_hi = y1 + max(total_advance, 0.0)

    static_xyz = np.column_stack([
        rng.uniform(x0, x1, config.n_static),
        rng.uniform(y0, world_y_hi, config.n_static),
        rng.uniform(z0, z1, config.n_static),
    ])

    tracks: list[ObjectTrack] = []
    mover_offsets: list[np.ndarray] = []
    for obj in range(config.n_objects):
        n_pts = int(rng.integers(config.object_points[0], config.object_points[1] + 1))
        extent = float(rng.uniform(*config.object_extent))
        center0 = np.array([
            rng.uniform(x0, x1),
            rng.uniform(y0, world_y_hi),
            rng.uniform(z0, z1),
        ])
        speed = float(rng.uniform(*config.object_speed))
        heading = float(rng.uniform(0.0, 2 * np.pi))
        vel = speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        offsets = rng.uniform(-1.0, 1.0, size=(n_pts, 3))
        offsets *= extent / np.maximum(np.linalg.norm(offsets, axis=1, keepdims=True), 1.0)
        offsets[:, 2] *= 0.2  # flat-ish objects, vehicle-like
        times = np.arange(config.n_frames) * dt
        positions = center0[None, :] + times[:, None] * vel[None, :]
        tracks.append(ObjectTrack(object_id=obj, positions=positions,
                                  velocities=np.tile(vel, (config.n_frames, 1)),
                                  extent=extent, kind="moving"))
        mover_offsets.append(offsets)

    frames: list[RadarFrame] = []
    for t in range(config.n_frames):
        ego_pos = np.array([0.0, ego_y[t], 0.0])
        ego_vel = np.array([0.0, profile[t], 0.0])
        frame_rng = np.random.default_rng(mix_seed(config.seed, 0xF4A3E, t))

        world_pts = [static_xyz]
        world_vels = [np.zeros_like(static_xyz)]
        labels = [np.zeros(config.n_static, dtype=np.int64)]
        for track, offsets in zip(tracks, mover_offsets):
            pts = track.positions[t][None, :] + offsets
            world_pts.append(pts)
            world_vels.append(np.tile(track.velocities[t], (pts.shape[0], 1)))
            labels.append(np.ones(pts.shape[0], dtype=np.int64))
        world_pts = np.concatenate(world_pts)
        world_vels = np.concatenate(world_vels)
        labels = np.concatenate(labels)

        p_ego = world_pts - ego_pos
        in_fov = ((p_ego[:, 0] >= x0) & (p_ego[:, 0] <= x1)
                  & (p_ego[:, 1] >= y0) & (p_ego[:, 1] <= y1)
                  & (p_ego[:, 2] >= z0) & (p_ego[:, 2] <= z1))
        if config.dropout > 0.0:
            in_fov &= frame_rng.uniform(size=in_fov.size) >= config.dropout
        p_ego = p_ego[in_fov]
        vels = world_vels[in_fov]
        labs = labels[in_fov]

        v = _measure_batch(ego_vel, vels, p_ego, config.velocity_noise, frame_rng) \
            if p_ego.size else np.zeros(0)
        if config.position_noise > 0.0 and p_ego.size:
            p_ego = p_ego + frame_rng.normal(0.0, config.position_noise, size=p_ego.shape)

        frames.append(RadarFrame(xyz=p_ego.reshape(-1, 3), v=v,
                                 timestamp=t * dt, ego_v=float(profile[t]),
                                 labels=labs))
    return LabeledSequence(frames=frames, tracks=tracks, config=config)


# file format --------------------------------------------------------------------

_POINTS_HEADER = "frame_idx,point_idx,x,y,z,v,label"
_EGO_HEADER = "frame_idx,timestamp,ego_v"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_sequence(seq: LabeledSequence, path) -> None:
    """Write ``points.csv`` and ``ego.csv`` under ``path`` (a directory)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ego.csv", "w", encoding="utf-8") as fh:
        fh.write(_EGO_HEADER + "\n")
        for i, frame in enumerate(seq.frames):
            ego = frame.ego_v if frame.ego_v is not None else float("nan")
            fh.write(f"{i},{_fmt(frame.timestamp)},{_fmt(ego)}\n")
    with open(out / "points.csv", "w", encoding="utf-8") as fh:
        fh.write(_POINTS_HEADER + "\n")
        for i, frame in enumerate(seq.frames):
            labels = frame.labels if frame.labels is not None else np.full(len(frame), -1)
            for j in range(len(frame)):
                x, y, z = frame.xyz[j]
                fh.write(f"{i},{j},{_fmt(x)},{_fmt(y)},{_fmt(z)},"
                         f"{_fmt(frame.v[j])},{int(labels[j])}\n")


def _parse_float(text: str, lineno: int, path) -> float:
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-numeric field {text!r}") from None


def _parse_int(text: str, lineno: int, path) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-integer field {text!r}") from None


def read_sequence(path) -> LabeledSequence:
    """Read a sequence directory back; tracks and config are not persisted."""
    root = Path(path)
    ego_path = root / "ego.csv"
    pts_path = root / "points.csv"
    if not ego_path.exists() or not pts_path.exists():
        raise ParseError(f"{root}: missing ego.csv or points.csv")

    stamps: list[float] = []
    egos: list[float] = []
    with open(ego_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _EGO_HEADER:
            raise ParseError(f"{ego_path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"{ego_path}:{lineno}: expected 3 columns, got {len(parts)}")
            idx = _parse_int(parts[0], lineno, ego_path)
            if idx != len(stamps):
                raise ParseError(f"{ego_path}:{lineno}: frame indices must be contiguous")
            stamps.append(_parse_float(parts[1], lineno, ego_path))
            egos.append(_parse_float(parts[2], lineno, ego_path))

    per_frame: list[list[tuple]] = [[] for _ in stamps]
    with open(pts_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != _POINTS_HEADER:
            raise ParseError(f"{pts_path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ParseError(f"{pts_path}:{lineno}: expected 7 columns, got {len(parts)}")
            fidx = _parse_int(parts[0], lineno, pts_path)
            if not 0 <= fidx < len(stamps):
                raise ParseError(f"{pts_path}:{lineno}: frame index {fidx} out of range")
            vals = [_parse_float(p, lineno, pts_path) for p in parts[2:6]]
            label = _parse_int(parts[6], lineno, pts_path)
            per_frame[fidx].append((*vals, label))

    frames = []
    for i, rows in enumerate(per_frame):
        if rows:
            arr = np.array([r[:4] for r in rows], dtype=np.float64)
            labs = np.array([r[4] for r in rows], dtype=np.int64)
            labels = None if (labs < 0).all() else labs
            frames.append(RadarFrame(xyz=arr[:, :3], v=arr[:, 3], timestamp=stamps[i],
                                     ego_v=None if np.isnan(egos[i]) else egos[i],
                                     labels=labels))
        else:
            frames.append(RadarFrame(xyz=np.zeros((0, 3)), v=np.zeros(0),
                                     timestamp=stamps[i],
                                     ego_v=None if np.isnan(egos[i]) else egos[i],
                                     labels=np.zeros(0, dtype=np.int64)))
    return LabeledSequence(frames=frames)


def build_desk_dataset(seed: int = 42, n_sequences: int = 20, n_frames: int = 35,
                       velocity_noise: float = 0.1, dropout: float = 0.1,
                       n_static: int = 240, n_objects: int = 5,
                       object_points: tuple[int, int] = (16, 30),
                       ego_speed_range: tuple[float, float] = (1.0, 5.0),
                       ) -> list[tuple[str, LabeledSequence]]:
    """Standard desk-scale mix: driving-like scenes, per-sequence ego speeds
    drawn from ``ego_speed_range``, roughly 30% mover points in view."""
    rng = np.random.default_rng(mix_seed(seed, 0xDA7A))
    sequences = []
    for i in range(n_sequences):
        ego = float(rng.uniform(*ego_speed_range))
        cfg = SceneConfig(
            n_static=n_static, n_objects=n_objects, object_points=object_points,
            object_speed=(0.5, 3.5), ego_speed=ego, fov_y=(2.0, 50.0),
            velocity_noise=velocity_noise, dropout=dropout,
            n_frames=n_frames, seed=mix_seed(seed, 0x5E0, i))
        sequences.append((f"seq_{i:03d}", simulate_sequence(cfg)))
    return sequences


def split_dataset(sequences: list, ratios: tuple[float, float, float], seed: int):
    """Partition at sequence granularity into (train, val, test)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(sequences)
    nonzero = sum(1 for r in ratios if r > 0)
    if n < nonzero:
        raise ValueError(f"{n} sequences cannot fill {nonzero} splits")
    order = np.random.default_rng(mix_seed(seed, 0x59117)).permutation(n)

    counts = [int(np.floor(r * n)) for r in ratios]
    fracs = [r * n - c for r, c in zip(ratios, counts)]
    while sum(counts) < n:
        i = int(np.argmax(fracs))
        counts[i] += 1
        fracs[i] = -1.0
    for i, r in enumerate(ratios):  # every requested split gets a sequence
        if r > 0 and counts[i] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[i] += 1

    edges = np.cumsum([0] + counts)
    groups = [[sequences[j] for j in order[a:b]] for a, b in zip(edges[:-1], edges[1:])]
    return tuple(groups)
