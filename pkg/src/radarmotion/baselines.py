"""Classical comparators: RANSAC radial ego-speed, translation-only ICP,
and residual-threshold segmentation.

These double as independent oracles for the learned pipeline. The ego
model is 1-D forward motion, so the RANSAC hypothesis space is a single
scalar (one point solves it) and ICP fits a pure translation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RadarFrame, knn_indices, mix_seed

__all__ = [
    "RansacConfig",
    "IcpConfig",
    "DegenerateSceneError",
    "ransac_eve",
    "icp_velocity",
    "IcpResult",
    "threshold_mos",
]


class DegenerateSceneError(RuntimeError):
    """Too few consistent points to trust a robust estimate."""


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 100
    inlier_threshold: float = 0.25  # m/s
    min_inlier_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if not 0.0 < self.min_inlier_ratio <= 1.0:
            raise ValueError("minimum inlier ratio must lie in (0, 1]")


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    tolerance: float = 1e-9  # m, translation update norm
    max_correspondence: float = 5.0  # m

    def __post_init__(self):
        if self.max_iterations < 1 or self.tolerance <= 0 or self.max_correspondence <= 0:
            raise ValueError("ICP settings must be positive")


def ransac_eve(frame: RadarFrame, config: RansacConfig = RansacConfig()) -> float:
    """Forward speed consistent with the most radial-velocity measurements.

    Each hypothesis comes from one point via v = v_i * ||p_i|| / y_i; points
    with |y|/||p|| < 0.1 are too ill-conditioned to hypothesize from. The
    best-scoring hypothesis is refined by least squares over its inliers.
    A scene whose best consensus covers less than the configured ratio
    raises ``DegenerateSceneError`` (e.g. nothing static in view).
    """
    if len(frame) == 0:
        raise ValueError("empty frame")
    xyz = frame.xyz
    norm = np.linalg.norm(xyz, axis=1)
    if (norm == 0).any():
        raise ValueError("zero-norm point in frame")
    coef = xyz[:, 1] / norm  # model: v_i = v * coef_i
    usable = np.abs(coef) >= 0.1
    if not usable.any():
        raise DegenerateSceneError("no well-conditioned hypothesis points")
    candidates = np.nonzero(usable)[0]
    hypotheses = frame.v[candidates] / coef[candidates]

    rng = np.random.default_rng(mix_seed(config.seed, len(frame)))
    picks = rng.integers(0, candidates.size, size=config.iterations)
    best_count, best_v = -1, 0.0
    for h in hypotheses[picks]:
        count = int((np.abs(h * coef - frame.v) < config.inlier_threshold).sum())
        if count > best_count:
            best_count, best_v = count, float(h)

    inliers = np.abs(best_v * coef - frame.v) < config.inlier_threshold
    if inliers.sum() < config.min_inlier_ratio * len(frame):
        raise DegenerateSceneError(
            f"best consensus covers {int(inliers.sum())}/{len(frame)} points")
    c = coef[inliers]
    return float((c @ frame.v[inliers]) / (c @ c))


@dataclass(frozen=True)
class IcpResult:
    velocity: float
    translation: np.ndarray
    iterations: int
    converged: bool


def icp_velocity(frame_prev: RadarFrame, frame_t: RadarFrame, dt: float,
                 config: IcpConfig = IcpConfig()) -> IcpResult:
    """Forward speed from a translation-only point-to-point registration.

    Fits the translation that displaces the previous cloud onto the current
    one; under forward ego motion static geometry slides backward, so
    v = -translation_y / dt. Non-convergence is flagged, not raised.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(frame_prev) < 3 or len(frame_t) < 3:
        raise ValueError("ICP needs at least 3 points per frame")
    prev = frame_prev.xyz
    cur = frame_t.xyz
    trans = np.zeros(3)
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        moved = prev + trans
        nn = knn_indices(moved, cur, 1)[:, 0]
        delta = cur[nn] - moved
        dist = np.linalg.norm(delta, axis=1)
        close = dist <= config.max_correspondence
        if not close.any():
            break
        update = delta[close].mean(axis=0)
        trans = trans + update
        if np.linalg.norm(update) < config.tolerance:
            converged = True
            break
    return IcpResult(velocity=float(-trans[1] / dt), translation=trans,
                     iterations=iterations, converged=converged)


def threshold_mos(frame: RadarFrame, tau: float) -> np.ndarray:
    """Label moving where the compensated speed strictly exceeds ``tau``."""
    if tau < 0:
        raise ValueError("threshold must be non-negative")
    return (np.abs(frame.v) > tau).astype(np.int64)
