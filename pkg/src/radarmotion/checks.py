"""Gradient-check suite over every differentiable building block.

Each check compares analytic gradients against central finite differences
(64-bit, step 1e-5) on a small instance and must come in under a 1e-4
relative error. Runs from the command line via ``grad-check``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, affine, grad_check, relu, softmax_lastdim
from .attention import (
    PositionEncoder,
    TransitionUp,
    VectorAttentionLayer,
    cross_attention,
    vector_self_attention,
)
from .geometry import RadarFrame, ball_query_all
from .network import EveConfig, EveModel, MosConfig, MosModel, doppler_loss, eve_loss, mos_loss

__all__ = ["run_gradient_suite", "GRAD_TOL"]

GRAD_TOL = 1e-4


def _scene(rng, n, spread=4.0):
    xyz = rng.uniform(-spread, spread, size=(n, 3))
    xyz[:, 1] += spread + 2.0
    return RadarFrame(xyz=xyz, v=rng.standard_normal(n) * 0.3)


def _check_affine(rng):
    x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    c = Tensor(rng.standard_normal((6, 4)))
    return grad_check(lambda: (affine(x, w, b) * c).sum(), [x, w, b],
                      tol=GRAD_TOL, return_error=True)


def _check_relu(rng):
    signs = np.sign(rng.standard_normal(20))
    x = Tensor(signs * (0.2 + np.abs(rng.standard_normal(20))), requires_grad=True)
    c = Tensor(rng.standard_normal(20))
    return grad_check(lambda: (relu(x) * c).sum(), [x], tol=GRAD_TOL, return_error=True)


def _check_softmax(rng):
    x = Tensor(rng.standard_normal((5, 7)), requires_grad=True)
    c = Tensor(rng.standard_normal((5, 7)))
    return grad_check(lambda: (softmax_lastdim(x) * c).sum(), [x],
                      tol=GRAD_TOL, return_error=True)


def _check_position_encoder(rng):
    enc = PositionEncoder(6, rng, "enc")
    residuals = rng.standard_normal((8, 3))
    c = Tensor(rng.standard_normal((8, 6)))
    return grad_check(lambda: (enc.encode(residuals) * c).sum(), enc.parameters(),
                      tol=GRAD_TOL, return_error=True)


def _check_self_attention(rng):
    n, d, k = 10, 5, 4
    frame = _scene(rng, n)
    layer = VectorAttentionLayer(d, rng, "sa")
    feats = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    idx = ball_query_all(frame.xyz, frame.xyz, 10.0, k, seed=0)
    c = Tensor(rng.standard_normal((n, d)))
    return grad_check(
        lambda: (vector_self_attention(layer, feats, frame.xyz, idx) * c).sum(),
        [feats] + layer.parameters(), tol=GRAD_TOL, return_error=True)


def _check_cross_attention(rng):
    n, m, d = 8, 9, 4
    cur, prev = _scene(rng, n), _scene(rng, m)
    layer = VectorAttentionLayer(d, rng, "ca", pos_depth=3)
    f_t = Tensor(rng.standard_normal((n, d)), requires_grad=True)
    f_p = Tensor(rng.standard_normal((m, d)), requires_grad=True)
    c = Tensor(rng.standard_normal((n, d)))
    return grad_check(
        lambda: (cross_attention(layer, f_t, cur.xyz, f_p, prev.xyz,
                                 radius=15.0, k=3, seed=1) * c).sum(),
        [f_t, f_p] + layer.parameters(), tol=GRAD_TOL, return_error=True)


def _check_transition_up(rng):
    coarse = _scene(rng, 6)
    fine = _scene(rng, 14)
    tu = TransitionUp(5, 3, 4, rng, "tu")
    cf = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
    sf = Tensor(rng.standard_normal((14, 3)), requires_grad=True)
    c = Tensor(rng.standard_normal((14, 4)))
    return grad_check(
        lambda: (tu.forward(coarse.xyz, cf, fine.xyz, sf) * c).sum(),
        [cf, sf] + tu.parameters(), tol=GRAD_TOL, return_error=True)


_TINY_EVE = EveConfig(point_budget=32, stage_widths=(8, 8, 8, 8),
                      ball_radii=(4.0, 6.0, 10.0), cross_radius=25.0,
                      k=4, g=2, head_sizes=(8, 4, 1))
_TINY_MOS = MosConfig(point_budget=32, stage_widths=(8, 8, 8, 8),
                      ball_radii=(4.0, 6.0, 10.0), cross_radius=25.0,
                      k=4, g=2, decoder_widths=(8, 8), head_sizes=(8, 4, 2))


def _check_eve_head(rng):
    model = EveModel(_TINY_EVE, seed=3)
    feats = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    params = [feats] + model.head.parameters()
    return grad_check(lambda: model.head_forward(feats, [(0, 2), (2, 4)]).sum(),
                      params, tol=GRAD_TOL, return_error=True)


def _check_mos_head(rng):
    model = MosModel(_TINY_MOS, seed=4)
    feats = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
    c = Tensor(rng.standard_normal((6, 2)))
    params = [feats] + model.head.parameters()
    return grad_check(lambda: (model.head_forward(feats) * c).sum(),
                      params, tol=GRAD_TOL, return_error=True)


def _check_eve_loss(rng):
    frame = _scene(rng, 12)
    v_hat = Tensor(1.2, requires_grad=True)
    return grad_check(lambda: eve_loss(v_hat, 2.0, frame), [v_hat],
                      tol=GRAD_TOL, return_error=True)


def _check_doppler_loss(rng):
    frame = _scene(rng, 10)
    v_hat = Tensor(0.7, requires_grad=True)
    return grad_check(lambda: doppler_loss(v_hat, frame), [v_hat],
                      tol=GRAD_TOL, return_error=True)


def _check_mos_loss(rng):
    logits = Tensor(rng.standard_normal((10, 2)), requires_grad=True)
    labels = (rng.uniform(size=10) < 0.5).astype(int)
    return grad_check(lambda: mos_loss(logits, labels, (0.7, 1.3)), [logits],
                      tol=GRAD_TOL, return_error=True)


CHECKS = [
    ("affine", _check_affine),
    ("relu", _check_relu),
    ("softmax", _check_softmax),
    ("position_encoder", _check_position_encoder),
    ("vector_self_attention", _check_self_attention),
    ("cross_attention", _check_cross_attention),
    ("transition_up", _check_transition_up),
    ("eve_head", _check_eve_head),
    ("mos_head", _check_mos_head),
    ("doppler_loss", _check_doppler_loss),
    ("eve_loss", _check_eve_loss),
    ("mos_loss", _check_mos_loss),
]


def run_gradient_suite(seed: int = 0) -> list[tuple[str, bool, float]]:
    """Run every check; returns (name, passed, max relative error) rows."""
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        rng = np.random.default_rng(seed + i * 1000)
        ok, err = fn(rng)
        results.append((name, ok, err))
    return results
