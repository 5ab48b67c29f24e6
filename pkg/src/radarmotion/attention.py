"""Vector attention layers for radar point clouds.

One shared kernel realizes both the intra-frame affinity

    y_i = sum_j softmax_j(delta(alpha(x_i) - beta(x_j) + w_ij)) * (gamma(x_j) + w_ij)

and the cross-frame variant (same form, separate parameters, neighbors
drawn from the previous frame). The softmax runs over each query's K
neighbors independently per channel. Position encodings are MLPs of the
coordinate residual p_i - p_j. Object attention feeds the kernel ball-query
neighborhoods; scenario attention feeds distance-rank strided ones.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    Parameter,
    Tensor,
    affine,
    attention_pool,
    concat,
    gather_rows,
    relu,
)
from .geometry import (
    RadarFrame,
    ball_query_all,
    farthest_point_sample,
    interval_sample_all,
    knn_indices,
    mix_seed,
)

__all__ = [
    "Linear",
    "Mlp",
    "PositionEncoder",
    "VectorAttentionLayer",
    "position_encoding",
    "vector_self_attention",
    "object_attention",
    "scenario_attention",
    "cross_attention",
    "TransitionDown",
    "TransitionUp",
    "interpolate_features",
]


def _init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """Affine layer holding named weight/bias parameters.

    Weights and biases init uniform within +/- 1/sqrt(fan_in); a nonzero
    bias keeps zero inputs (self-residuals) off the ReLU kink.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(_init(rng, fan_in, fan_out), f"{name}.w")
        self.bias = Parameter(rng.uniform(-bound, bound, size=fan_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return affine(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Mlp:
    """Stack of affine layers with ReLU between them.

    ``trailing_relu`` appends one more ReLU after the last layer, which the
    deeper cross-frame position encoder uses.
    """

    def __init__(self, sizes: list[int], rng, name: str, trailing_relu: bool = False):
        self.layers = [Linear(a, b, rng, f"{name}.{i}")
                       for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        self.trailing_relu = trailing_relu

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = affine(x, layer.weight, layer.bias,
                       fuse_relu=(i < last or self.trailing_relu))
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class PositionEncoder:
    """MLP from a 3-d coordinate residual to a D-d encoding.

    ``depth=2`` gives two linear layers with one ReLU; ``depth=3`` gives
    three linear layers each followed by ReLU (the heavier segmentation
    variant). ``coord_scale`` pre-scales residuals so scene-sized inputs
    stay in a trainable range.
    """

    def __init__(self, dim: int, rng, name: str, depth: int = 2, coord_scale: float = 1.0):
        if depth == 2:
            self.mlp = Mlp([3, dim, dim], rng, name)
        elif depth == 3:
            self.mlp = Mlp([3, dim, dim, dim], rng, name, trailing_relu=True)
        else:
            raise ValueError(f"unsupported position encoder depth {depth}")
        self.dim = dim
        self.coord_scale = coord_scale

    def encode(self, residuals: np.ndarray) -> Tensor:
        """Residuals may carry leading batch dimensions: (..., 3) -> (..., D)."""
        r = np.atleast_2d(residuals) * self.coord_scale
        return self.mlp(Tensor(r))

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()


def position_encoding(encoder: PositionEncoder, p_i, p_j) -> Tensor:
    """Encode the residual p_i - p_j into a D-vector."""
    r = np.asarray(p_i, dtype=np.float64)[:3] - np.asarray(p_j, dtype=np.float64)[:3]
    return encoder.encode(r[None, :]).reshape(encoder.dim)


class VectorAttentionLayer:
    """Parameters for one attention layer: alpha, beta, gamma, the delta MLP
    and a position encoder, all at feature width ``dim``."""

    def __init__(self, dim: int, rng, name: str, pos_depth: int = 2,
                 coord_scale: float = 1.0):
        self.dim = dim
        self.alpha = Linear(dim, dim, rng, f"{name}.alpha")
        self.beta = Linear(dim, dim, rng, f"{name}.beta")
        self.gamma = Linear(dim, dim, rng, f"{name}.gamma")
        self.delta = Mlp([dim, dim, dim], rng, f"{name}.delta")
        self.pos = PositionEncoder(dim, rng, f"{name}.pos", depth=pos_depth,
                                   coord_scale=coord_scale)

    def parameters(self) -> list[Parameter]:
        return (self.alpha.parameters() + self.beta.parameters() + self.gamma.parameters()
                + self.delta.parameters() + self.pos.parameters())

    def forward(self, features_q: Tensor, points_q: np.ndarray,
                features_kv: Tensor, points_kv: np.ndarray,
                neighbor_idx: np.ndarray) -> Tensor:
        """Attend each of the Q query points over its K neighbors in the
        key/value cloud. ``neighbor_idx`` is (Q, K) into the kv cloud."""
        nq, k = neighbor_idx.shape
        d = self.dim
        if features_q.shape != (nq, d):
            raise ValueError(f"query features {features_q.shape} != ({nq}, {d})")
        flat = neighbor_idx.reshape(-1)

        residuals = points_q[:, None, :] - points_kv[flat].reshape(nq, k, 3)
        omega = self.pos.encode(residuals)                           # (Q, K, D)

        # transform on the source cloud, then gather: same math, K-fold less work
        bj = gather_rows(self.beta(features_kv), flat, shape=(nq, k, d))
        gj = gather_rows(self.gamma(features_kv), flat, shape=(nq, k, d))
        pre = self.alpha(features_q).reshape(nq, 1, d) - bj + omega
        return attention_pool(self.delta(pre), gj + omega, axis=1)


def vector_self_attention(layer: VectorAttentionLayer, features: Tensor,
                          points: np.ndarray, neighbor_idx: np.ndarray) -> Tensor:
    """Self-attention with explicit neighbor sets (indices into the same cloud)."""
    return layer.forward(features, points, features, points, neighbor_idx)


def object_attention(layer: VectorAttentionLayer, frame: RadarFrame, features: Tensor,
                     radius: float, k: int, seed: int) -> Tensor:
    """Self-attention over seeded random ball neighborhoods."""
    idx = ball_query_all(frame.xyz, frame.xyz, radius, k, seed)
    return vector_self_attention(layer, features, frame.xyz, idx)


def scenario_attention(layer: VectorAttentionLayer, frame: RadarFrame, features: Tensor,
                       g: int, k: int) -> Tensor:
    """Self-attention over distance-rank strided neighborhoods."""
    idx = interval_sample_all(frame.xyz, frame.xyz, g, k)
    return vector_self_attention(layer, features, frame.xyz, idx)


def cross_attention(layer: VectorAttentionLayer,
                    features_t: Tensor, points_t: np.ndarray,
                    features_prev: Tensor, points_prev: np.ndarray,
                    radius: float, k: int, seed: int) -> Tensor:
    """Attention with current-frame queries over previous-frame neighborhoods.

    Neighborhoods are ball queries into the previous cloud; a query with an
    empty ball falls back to its single nearest previous point repeated.
    """
    if points_prev.shape[0] == 0:
        raise ValueError("previous frame is empty")
    idx = ball_query_all(points_t, points_prev, radius, k, seed,
                         allow_empty_fallback=True)
    return layer.forward(features_t, points_t, features_prev, points_prev, idx)


class TransitionDown:
    """FPS to a coarser cloud, project features to the new width, then
    object-attend each surviving center over its ball in the full cloud."""

    def __init__(self, dim_in: int, dim_out: int, rng, name: str,
                 radius: float, k: int, pos_depth: int = 2, coord_scale: float = 1.0):
        self.project = Linear(dim_in, dim_out, rng, f"{name}.project")
        self.attend = VectorAttentionLayer(dim_out, rng, f"{name}.attend",
                                           pos_depth=pos_depth, coord_scale=coord_scale)
        self.radius = radius
        self.k = k

    def parameters(self) -> list[Parameter]:
        return self.project.parameters() + self.attend.parameters()

    def forward(self, frame: RadarFrame, features: Tensor, target_count: int,
                seed: int) -> tuple[RadarFrame, Tensor, np.ndarray]:
        if target_count > len(frame):
            raise ValueError(f"cannot downsample {len(frame)} points to {target_count}")
        centers = farthest_point_sample(frame, target_count, seed=seed)
        projected = relu(self.project(features))
        sub = frame.take(centers)
        idx = ball_query_all(sub.xyz, frame.xyz, self.radius, self.k,
                             mix_seed(seed, 0x7D))
        out = self.attend.forward(gather_rows(projected, centers), sub.xyz,
                                  projected, frame.xyz, idx)
        return sub, out, centers


def interpolate_features(coarse_xyz: np.ndarray, coarse_features: Tensor,
                         fine_xyz: np.ndarray, k: int = 3) -> Tensor:
    """Inverse-distance blend of each fine point's nearest coarse features.

    A zero-distance coarse point takes all the weight (split evenly if
    several coincide). Falls back to however many coarse points exist
    when there are fewer than ``k``.
    """
    k = min(k, coarse_xyz.shape[0])
    idx = knn_indices(fine_xyz, coarse_xyz, k)                      # (F, k)
    d = np.linalg.norm(fine_xyz[:, None, :] - coarse_xyz[idx], axis=2)
    zero = d <= 0.0
    any_zero = zero.any(axis=1)
    with np.errstate(divide="ignore"):
        w = 1.0 / np.where(d > 0.0, d, np.inf)
    w[any_zero] = zero[any_zero].astype(np.float64)
    w /= w.sum(axis=1, keepdims=True)

    nf = fine_xyz.shape[0]
    dim = coarse_features.shape[1]
    gathered = gather_rows(coarse_features, idx.reshape(-1)).reshape(nf, k, dim)
    return (Tensor(w[:, :, None]) * gathered).sum(axis=1)


class TransitionUp:
    """Interpolate coarse features up to the fine cloud, concatenate the
    fine cloud's skip features, and fuse with an affine layer."""

    def __init__(self, dim_coarse: int, dim_skip: int, dim_out: int, rng, name: str):
        self.fuse = Linear(dim_coarse + dim_skip, dim_out, rng, f"{name}.fuse")

    def parameters(self) -> list[Parameter]:
        return self.fuse.parameters()

    def forward(self, coarse_xyz: np.ndarray, coarse_features: Tensor,
                fine_xyz: np.ndarray, skip_features: Tensor) -> Tensor:
        upsampled = interpolate_features(coarse_xyz, coarse_features, fine_xyz)
        return relu(self.fuse(concat([upsampled, skip_features], axis=1)))
