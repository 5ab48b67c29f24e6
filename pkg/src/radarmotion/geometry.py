"""Point-cloud containers and the non-learned radar math.

Sampling primitives (farthest-point, kNN, ball query, distance-rank
interval sampling), the radial projection of a forward ego velocity,
and Doppler velocity compensation. All randomness is driven by a
splitmix64 hash of (seed, point coordinates), which makes every
sampler a pure function of its inputs and keeps neighbor draws stable
under permutations of the cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

__all__ = [
    "RadarPoint",
    "RadarFrame",
    "NeighborSet",
    "farthest_point_sample",
    "knn",
    "ball_query_sample",
    "interval_sample",
    "radial_projection",
    "velocity_compensate",
    "Compensated",
    "random_subsample",
]

_U = np.uint64
_GOLDEN = _U(0x9E3779B97F4A7C15)
_MIX1 = _U(0xBF58476D1CE4E5B9)
_MIX2 = _U(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 arrays (wraparound intended)."""
    with np.errstate(over="ignore"):
        z = (x + _GOLDEN).astype(_U)
        z = (z ^ (z >> _U(30))) * _MIX1
        z = (z ^ (z >> _U(27))) * _MIX2
        return z ^ (z >> _U(31))


def mix_seed(seed: int, *extra: int) -> int:
    h = splitmix64(np.asarray(np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    for e in extra:
        h = splitmix64(h ^ np.uint64(e & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def point_keys(xyz: np.ndarray) -> np.ndarray:
    """Identity hash per point from its coordinate bit patterns."""
    bits = np.ascontiguousarray(xyz, dtype=np.float64).view(_U)
    h = splitmix64(bits[:, 0])
    h = splitmix64(h ^ bits[:, 1])
    h = splitmix64(h ^ bits[:, 2])
    return h


def _uniform01(h: np.ndarray) -> np.ndarray:
    return (h >> _U(11)).astype(np.float64) * (2.0 ** -53)


@dataclass(frozen=True)
class RadarPoint:
    """One 4D radar return: position in meters, radial velocity in m/s.

    Sign convention: a static point seen under forward ego speed v
    measures v_radial = v * y / ||p||.
    """

    x: float
    y: float
    z: float
    v: float = 0.0

    @property
    def norm(self) -> float:
        return float(np.sqrt(self.x ** 2 + self.y ** 2 + self.z ** 2))


@dataclass
class RadarFrame:
    """One timestamped radar point cloud held as arrays.

    ``xyz`` is (N, 3); ``v`` is (N,) radial velocities; ``labels`` is an
    optional (N,) int array with 0 = static, 1 = moving; ``ego_v`` is the
    optional ground-truth forward speed.
    """

    xyz: np.ndarray
    v: np.ndarray
    timestamp: float = 0.0
    ego_v: float | None = None
    labels: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.xyz = np.atleast_2d(np.asarray(self.xyz, dtype=np.float64))
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1)
        if self.xyz.shape != (self.v.size, 3):
            raise ValueError(f"xyz shape {self.xyz.shape} inconsistent with {self.v.size} velocities")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.size != self.v.size:
                raise ValueError("labels length must equal point count")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")

    def __len__(self) -> int:
        return self.v.size

    @property
    def n_points(self) -> int:
        return self.v.size

    def point(self, i: int) -> RadarPoint:
        return RadarPoint(*self.xyz[i], self.v[i])

    def take(self, indices: np.ndarray) -> "RadarFrame":
        idx = np.asarray(indices, dtype=np.intp)
        return RadarFrame(
            xyz=self.xyz[idx],
            v=self.v[idx],
            timestamp=self.timestamp,
            ego_v=self.ego_v,
            labels=None if self.labels is None else self.labels[idx],
        )

    def with_velocity(self, v_new: np.ndarray) -> "RadarFrame":
        return replace(self, v=np.asarray(v_new, dtype=np.float64))


@dataclass(frozen=True)
class NeighborSet:
    """Exactly K neighbor indices for one query point."""

    query_index: int
    indices: np.ndarray
    k: int
    source: str = "same-frame"

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.intp))
        if self.indices.size != self.k:
            raise ValueError(f"neighbor set must have exactly k={self.k} indices")


def _as_query_xyz(query) -> np.ndarray:
    if isinstance(query, RadarPoint):
        return np.array([query.x, query.y, query.z], dtype=np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size == 4:
        q = q[:3]
    if q.size != 3:
        raise ValueError("query must be a 3-vector or RadarPoint")
    return q


def farthest_point_sample(frame: RadarFrame, count: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``count`` indices on 3D distance.

    The first point is a seeded hash pick over point identities, so the
    selected set depends only on (seed, point set), not input order.
    """
    n = len(frame)
    if count > n:
        raise ValueError(f"cannot sample {count} points from a frame of {n}")
    if count <= 0:
        raise ValueError("count must be positive")
    xyz = frame.xyz
    keys = splitmix64(point_keys(xyz) ^ np.uint64(mix_seed(seed)))
    first = int(np.argmin(keys))
    selected = np.empty(count, dtype=np.intp)
    selected[0] = first
    dist = np.sum((xyz - xyz[first]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        d_new = np.sum((xyz - xyz[nxt]) ** 2, axis=1)
        np.minimum(dist, d_new, out=dist)
    return selected


def knn_indices(query_xyz: np.ndarray, cloud_xyz: np.ndarray, k: int) -> np.ndarray:
    """Batched kNN: (Q, 3) queries against (N, 3) cloud, with cyclic repeats
    when the cloud is smaller than k. Ties break toward lower index."""
    if k <= 0:
        raise ValueError("k must be positive")
    n = cloud_xyz.shape[0]
    d2 = ((query_xyz[:, None, :] - cloud_xyz[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, np.arange(k) % n]


def knn(query, frame: RadarFrame, k: int) -> NeighborSet:
    """k nearest frame points to ``query`` by 3D Euclidean distance."""
    if len(frame) == 0:
        raise ValueError("frame is empty")
    q = _as_query_xyz(query)
    idx = knn_indices(q[None, :], frame.xyz, k)[0]
    return NeighborSet(query_index=-1, indices=idx, k=k, source="same-frame")


def _sq_distances(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(Q, C) squared distances via the Gram expansion (fast, membership-grade
    precision; do not use where exact rank order matters)."""
    d2 = (q * q).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * (q @ c.T)
    return np.maximum(d2, 0.0)


def ball_query_all(query_xyz: np.ndarray, cloud_xyz: np.ndarray,
                   radius: float, k: int, seed: int,
                   allow_empty_fallback: bool = False) -> np.ndarray:
    """Seeded random K-sample inside a radius ball around each query.

    Returns (Q, k) indices into the cloud. Draws are keyed to the hash of
    (seed, query identity, candidate identity): with enough candidates the
    k lowest-keyed in-ball points form a uniform without-replacement
    sample; short balls fall back to uniform draws with replacement. The
    chosen k are ordered by key, so the result is independent of cloud
    ordering. With ``allow_empty_fallback`` an empty ball degrades to the
    single nearest point repeated (cross-frame queries may be off-cloud).
    """
    if radius <= 0:
        raise ValueError("ball radius must be positive")
    if k <= 0:
        raise ValueError("k must be positive")
    q = np.atleast_2d(query_xyz)
    d2 = _sq_distances(q, cloud_xyz)
    mask = d2 <= radius * radius
    counts = mask.sum(axis=1)

    qkeys = point_keys(q) ^ np.uint64(mix_seed(seed))
    ckeys = point_keys(cloud_xyz)
    # asymmetric mix so a self-pair key still varies per point
    pair = splitmix64(splitmix64(qkeys)[:, None] ^ ckeys[None, :])
    masked_keys = np.where(mask, pair, np.iinfo(np.uint64).max)

    out = np.empty((q.shape[0], k), dtype=np.intp)
    full = counts >= k
    if full.any():
        keys = masked_keys[full]
        part = np.argpartition(keys, k - 1, axis=1)[:, :k]
        rowsel = np.take_along_axis(keys, part, axis=1)
        order = np.argsort(rowsel, axis=1, kind="stable")
        out[full] = np.take_along_axis(part, order, axis=1)
    short = ~full
    if short.any():
        rows = np.nonzero(short)[0]
        n_short = rows.size
        scounts = counts[rows]
        if (scounts == 0).any():
            if not allow_empty_fallback:
                raise ValueError("empty ball around an in-frame query; radius contract violated")
            empty = rows[scounts == 0]
            nearest = np.argmin(d2[empty], axis=1)
            masked_keys[empty, nearest] = 0  # single candidate
            scounts = np.maximum(scounts, 1)
        # candidates in canonical (key-sorted) order, then k uniform draws
        # with replacement keyed to (query, slot)
        cand_order = np.argsort(masked_keys[rows], axis=1, kind="stable")
        slot_h = splitmix64(splitmix64(qkeys[rows])[:, None]
                            ^ splitmix64(np.arange(k, dtype=_U))[None, :])
        draws = np.floor(_uniform01(slot_h) * scounts[:, None]).astype(np.intp)
        draws = np.minimum(draws, (scounts - 1)[:, None])
        out[rows] = np.take_along_axis(cand_order, draws, axis=1)
    return out


def ball_query_sample(query, frame: RadarFrame, radius: float, k: int,
                      seed: int) -> NeighborSet:
    """Random K-subset of the frame points within ``radius`` of ``query``."""
    q = _as_query_xyz(query)
    idx = ball_query_all(q[None, :], frame.xyz, radius, k, seed)[0]
    return NeighborSet(query_index=-1, indices=idx, k=k, source="same-frame")


def interval_sample_all(query_xyz: np.ndarray, cloud_xyz: np.ndarray,
                        g: int, k: int) -> np.ndarray:
    """Distance-rank strided sampling: ranks 0, g, 2g, ... wrap modulo N."""
    if g < 1 or k < 1:
        raise ValueError("stride and k must be >= 1")
    q = np.atleast_2d(query_xyz)
    d2 = ((q[:, None, :] - cloud_xyz[None, :, :]) ** 2).sum(axis=2)
    order = np.argsort(d2, axis=1, kind="stable")
    ranks = (np.arange(k) * g) % cloud_xyz.shape[0]
    return order[:, ranks]


def interval_sample(query, frame: RadarFrame, g: int, k: int) -> NeighborSet:
    q = _as_query_xyz(query)
    idx = interval_sample_all(q[None, :], frame.xyz, g, k)[0]
    return NeighborSet(query_index=-1, indices=idx, k=k, source="same-frame")


def radial_projection(ego_v: float, p: RadarPoint) -> float:
    """Project a forward ego speed onto the line of sight: ego_v * y / ||p||."""
    norm = p.norm
    if norm == 0.0:
        raise ValueError("cannot project onto a zero-norm point")
    return ego_v * p.y / norm


class Compensated(NamedTuple):
    """Velocity-compensated frame plus the count of dropped degenerate points."""

    frame: RadarFrame
    dropped: int
    kept: np.ndarray


def velocity_compensate(est_v: float, frame: RadarFrame) -> Compensated:
    """Remove the ego-motion component from each measured radial velocity.

    Per point: v' = est_v * y / sqrt(x^2+y^2) - v * sqrt(x^2+y^2+z^2) / sqrt(x^2+y^2).
    Geometry is unchanged. Points with x = y = 0 have no defined ground-plane
    bearing and are dropped; their count is reported instead of raising.
    """
    xyz = frame.xyz
    rho = np.sqrt(xyz[:, 0] ** 2 + xyz[:, 1] ** 2)
    keep = rho > 0.0
    kept_idx = np.nonzero(keep)[0]
    sub = frame.take(kept_idx) if not keep.all() else frame
    rho = rho[keep] if not keep.all() else rho
    norm = np.sqrt((sub.xyz ** 2).sum(axis=1))
    v_new = est_v * sub.xyz[:, 1] / rho - sub.v * norm / rho
    return Compensated(frame=sub.with_velocity(v_new), dropped=int((~keep).sum()),
                       kept=kept_idx)


def random_subsample(frame: RadarFrame, count: int, seed: int) -> RadarFrame:
    """Uniform ``count``-point subsample; with replacement when the frame
    is smaller than ``count``."""
    n = len(frame)
    if n == 0:
        raise ValueError("cannot subsample an empty frame")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(mix_seed(seed, n, count))
    if n >= count:
        idx = rng.choice(n, size=count, replace=False)
    else:
        idx = rng.choice(n, size=count, replace=True)
    return frame.take(idx)
