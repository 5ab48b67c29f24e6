import numpy as np
import pytest

from radarmotion.autodiff import Tensor, grad_check
from radarmotion.geometry import RadarFrame
from radarmotion.network import (
    EveConfig,
    EveModel,
    MosConfig,
    MosModel,
    PointPack,
    doppler_loss,
    eve_loss,
    load_model,
    mos_loss,
    predict_pipeline,
    save_model,
)

TINY_EVE = EveConfig(point_budget=32, stage_widths=(8, 8, 8, 8),
                     ball_radii=(3.0, 5.0, 9.0), cross_radius=20.0,
                     k=4, g=2, head_sizes=(8, 4, 1))
TINY_MOS = MosConfig(point_budget=32, stage_widths=(8, 8, 8, 8),
                     ball_radii=(3.0, 5.0, 9.0), cross_radius=20.0,
                     k=4, g=2, decoder_widths=(8, 8), head_sizes=(8, 4, 2))


def scene_frame(rng, n, ego_v=None):
    xyz = rng.uniform(-6, 6, size=(n, 3))
    xyz[:, 1] += 8.0
    v = rng.standard_normal(n) * 0.3
    return RadarFrame(xyz=xyz, v=v, ego_v=ego_v)


def frame_pair(rng, n=32):
    return scene_frame(rng, n), scene_frame(rng, n)


class TestEveModel:
    def test_stage_counts(self):
        cfg = EveConfig()
        assert cfg.stage_counts == (512, 128, 32, 32)

    def test_default_config_bottleneck_shape(self):
        rng = np.random.default_rng(99)
        model = EveModel(EveConfig(), seed=0)
        cur, prev = frame_pair(rng, n=512)
        pack, fused = model.backbone(PointPack([cur]), PointPack([prev]), seed=0)
        assert fused.shape == (32, 128)
        out = model.head_forward(fused, pack.slices)
        assert out.shape == (1, 1)

    def test_backbone_output_shape(self):
        rng = np.random.default_rng(0)
        model = EveModel(TINY_EVE, seed=1)
        cur, prev = frame_pair(rng)
        pack, fused = model.backbone(PointPack([cur]), PointPack([prev]), seed=0)
        assert fused.shape == (32 // 16, 8)

    def test_head_constant_rows_pool_to_row(self):
        rng = np.random.default_rng(1)
        model = EveModel(TINY_EVE, seed=2)
        row = rng.standard_normal(8)
        feats = Tensor(np.tile(row, (4, 1)))
        pooled = model.head(Tensor(row[None, :]))
        out = model.head_forward(feats, [(0, 4)])
        np.testing.assert_allclose(out.data, pooled.data, atol=1e-12)

    def test_forward_scalar_per_pair(self):
        rng = np.random.default_rng(2)
        model = EveModel(TINY_EVE, seed=3)
        pairs = [frame_pair(rng) for _ in range(3)]
        cur = PointPack([p[0] for p in pairs])
        prev = PointPack([p[1] for p in pairs])
        out = model.forward(cur, prev, seed=0)
        assert out.shape == (3, 1)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        model = EveModel(TINY_EVE, seed=4)
        cur, prev = frame_pair(rng)
        a = model.estimate(cur, prev, seed=9)
        b = model.estimate(cur, prev, seed=9)
        assert a == b

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        model = EveModel(TINY_EVE, seed=5)
        pairs = [frame_pair(rng) for _ in range(3)]
        batched = model.forward(PointPack([p[0] for p in pairs]),
                                PointPack([p[1] for p in pairs]), seed=7)
        for i, (cur, prev) in enumerate(pairs):
            single = model.forward(PointPack([cur]), PointPack([prev]), seed=7)
            np.testing.assert_allclose(batched.data[i], single.data[0], atol=1e-9)

    def test_head_gradient_reaches_all_inputs(self):
        rng = np.random.default_rng(5)
        model = EveModel(TINY_EVE, seed=6)
        feats = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
        out = model.head_forward(feats, [(0, 4)])
        out.sum().backward()
        assert (np.abs(feats.grad) > 0).all()

    def test_backbone_and_head_grad_check(self):
        rng = np.random.default_rng(6)
        model = EveModel(TINY_EVE, seed=7)
        cur, prev = frame_pair(rng)
        cur_pack, prev_pack = PointPack([cur]), PointPack([prev])

        def loss():
            return model.forward(cur_pack, prev_pack, seed=3).sum()

        ok, err = grad_check(loss, model.parameters(), tol=1e-4,
                             max_checks=6, seed=0, return_error=True)
        assert ok, f"max rel err {err}"


class TestMosModel:
    def test_output_shapes(self):
        rng = np.random.default_rng(7)
        model = MosModel(TINY_MOS, seed=8)
        cur, prev = frame_pair(rng)
        feats = model.backbone(PointPack([cur]), PointPack([prev]), seed=0)
        assert feats.shape == (32, TINY_MOS.decoder_widths[-1])
        logits = model.head_forward(feats)
        assert logits.shape == (32, 2)

    def test_default_config_decoder_width(self):
        assert MosConfig().decoder_widths[-1] == 32

    def test_default_config_per_point_features(self):
        rng = np.random.default_rng(98)
        model = MosModel(MosConfig(), seed=0)
        cur, prev = frame_pair(rng, n=512)
        feats = model.backbone(PointPack([cur]), PointPack([prev]), seed=0)
        assert feats.shape == (512, 32)
        assert model.head_forward(feats).shape == (512, 2)

    def test_argmax_yields_binary_labels(self):
        rng = np.random.default_rng(8)
        model = MosModel(TINY_MOS, seed=9)
        cur, prev = frame_pair(rng)
        labels = model.predict_labels(cur, prev, seed=0)
        assert set(np.unique(labels)) <= {0, 1}

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        model = MosModel(TINY_MOS, seed=10)
        cur, prev = frame_pair(rng)
        a = model.predict_labels(cur, prev, seed=4)
        b = model.predict_labels(cur, prev, seed=4)
        np.testing.assert_array_equal(a, b)

    def test_backbone_grad_check_32_points(self):
        rng = np.random.default_rng(10)
        model = MosModel(TINY_MOS, seed=11)
        cur, prev = frame_pair(rng)
        cur_pack, prev_pack = PointPack([cur]), PointPack([prev])
        c = Tensor(rng.standard_normal((32, 2)))

        def loss():
            return (model.forward(cur_pack, prev_pack, seed=5) * c).sum()

        ok, err = grad_check(loss, model.parameters(), tol=1e-4,
                             max_checks=4, seed=1, return_error=True)
        assert ok, f"max rel err {err}"


class TestDopplerLoss:
    def test_exact_zero_on_consistent_point(self):
        frame = RadarFrame(xyz=[[0, 10, 0]], v=[2.0])
        assert doppler_loss(2.0, frame).item() == 0.0

    def test_unit_gap(self):
        frame = RadarFrame(xyz=[[0, 10, 0]], v=[2.0])
        assert doppler_loss(3.0, frame).item() == pytest.approx(1.0)

    def test_345_projection(self):
        frame = RadarFrame(xyz=[[3, 4, 0]], v=[4.0])
        assert doppler_loss(5.0, frame).item() == pytest.approx(0.0, abs=1e-12)

    def test_empty_static_set(self):
        frame = RadarFrame(xyz=np.zeros((0, 3)), v=np.zeros(0))
        with pytest.raises(ValueError):
            doppler_loss(1.0, frame)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(11)
        frame = scene_frame(rng, 20)
        perm = rng.permutation(20)
        a = doppler_loss(1.7, frame).item()
        b = doppler_loss(1.7, frame.take(perm)).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        frame = scene_frame(rng, 15)
        v_hat = Tensor(2.0, requires_grad=True)
        assert grad_check(lambda: doppler_loss(v_hat, frame), [v_hat], tol=1e-5)


class TestEveLoss:
    def test_zero_at_truth_with_consistent_points(self):
        xyz = np.array([[0.0, 10, 0], [3, 4, 0]])
        norm = np.linalg.norm(xyz, axis=1)
        v = 2.0 * xyz[:, 1] / norm
        frame = RadarFrame(xyz=xyz, v=v)
        assert eve_loss(2.0, 2.0, frame).item() == pytest.approx(0.0, abs=1e-12)

    def test_mse_term(self):
        frame = RadarFrame(xyz=[[0, 10, 0]], v=[2.0])
        loss = eve_loss(2.0, 1.0, frame).item()
        assert loss == pytest.approx(1.0)  # doppler 0, (2-1)^2 = 1

    def test_lower_bounded_by_parts(self):
        rng = np.random.default_rng(13)
        frame = scene_frame(rng, 10)
        for v_hat, v_true in [(0.0, 1.0), (2.0, 2.0), (-1.0, 3.0)]:
            total = eve_loss(v_hat, v_true, frame).item()
            dop = doppler_loss(v_hat, frame).item()
            mse = (v_hat - v_true) ** 2
            assert total >= max(dop, mse) - 1e-12
            assert total >= 0

    def test_gradient(self):
        rng = np.random.default_rng(14)
        frame = scene_frame(rng, 12)
        v_hat = Tensor(1.3, requires_grad=True)
        assert grad_check(lambda: eve_loss(v_hat, 2.0, frame), [v_hat], tol=1e-5)


class TestMosLoss:
    def test_uniform_logits_ln2(self):
        logits = Tensor(np.zeros((5, 2)))
        labels = np.array([0, 1, 0, 1, 1])
        assert mos_loss(logits, labels).item() == pytest.approx(np.log(2.0))

    def test_confident_correct_approaches_zero(self):
        logits = np.zeros((4, 2))
        labels = np.array([0, 1, 1, 0])
        logits[np.arange(4), labels] = 50.0
        assert mos_loss(Tensor(logits), labels).item() < 1e-12

    def test_weight_linearity(self):
        rng = np.random.default_rng(15)
        logits = Tensor(rng.standard_normal((20, 2)))
        labels = (rng.uniform(size=20) < 0.4).astype(int)
        base_static = mos_loss(logits, labels, (1.0, 1e-12)).item()
        base_moving = mos_loss(logits, labels, (1e-12, 1.0)).item()
        doubled = mos_loss(logits, labels, (1.0, 2.0)).item()
        single = mos_loss(logits, labels, (1.0, 1.0)).item()
        assert doubled - single == pytest.approx(base_moving, rel=1e-9)

    def test_unit_weights_match_unweighted(self):
        rng = np.random.default_rng(16)
        logits_data = rng.standard_normal((30, 2))
        labels = (rng.uniform(size=30) < 0.5).astype(int)
        weighted = mos_loss(Tensor(logits_data), labels, (1.0, 1.0)).item()
        # independent cross-entropy computation
        z = logits_data - logits_data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        expected = -np.log(p[np.arange(30), labels]).mean()
        assert weighted == pytest.approx(expected, abs=1e-12)

    def test_extreme_logits_finite(self):
        logits = Tensor(np.array([[1000.0, -1000.0], [-1000.0, 1000.0]]))
        out = mos_loss(logits, np.array([1, 0]))
        assert np.isfinite(out.item())

    def test_gradient(self):
        rng = np.random.default_rng(17)
        logits = Tensor(rng.standard_normal((8, 2)), requires_grad=True)
        labels = (rng.uniform(size=8) < 0.5).astype(int)
        assert grad_check(lambda: mos_loss(logits, labels, (0.8, 1.4)), [logits], tol=1e-5)


class TestCheckpointRoundTrip:
    def test_reload_bitwise_forward(self, tmp_path):
        rng = np.random.default_rng(18)
        model = EveModel(TINY_EVE, seed=19)
        cur, prev = frame_pair(rng)
        before = model.estimate(cur, prev, seed=2)
        path = tmp_path / "eve.ckpt"
        save_model(path, model, epoch=5)
        loaded, meta = load_model(path)
        assert meta["epoch"] == 5
        assert loaded.config == TINY_EVE
        after = loaded.estimate(cur, prev, seed=2)
        assert before == after

    def test_mos_reload(self, tmp_path):
        rng = np.random.default_rng(19)
        model = MosModel(TINY_MOS, seed=20)
        cur, prev = frame_pair(rng)
        before = model.predict_labels(cur, prev, seed=3)
        path = tmp_path / "mos.ckpt"
        save_model(path, model)
        loaded, _ = load_model(path)
        np.testing.assert_array_equal(before, loaded.predict_labels(cur, prev, seed=3))


class TestPredictPipeline:
    def test_oracle_velocity_zeroes_static_channel(self):
        # all-static noiseless scene measured under the shared convention
        rng = np.random.default_rng(20)
        ego = 2.5
        frames = []
        for _ in range(2):
            xyz = rng.uniform(-6, 6, size=(32, 3))
            xyz[:, 1] += 8.0
            norm = np.linalg.norm(xyz, axis=1)
            frames.append(RadarFrame(xyz=xyz, v=ego * xyz[:, 1] / norm, ego_v=ego))
        eve = EveModel(TINY_EVE, seed=21)
        mos = MosModel(TINY_MOS, seed=22)
        result = predict_pipeline(eve, mos, frames[0], frames[1], seed=0)
        # the learned estimate is arbitrary pre-training, but compensation must
        # be affine-consistent: recompensating with the true speed zeroes v'
        from radarmotion.geometry import velocity_compensate
        assert np.abs(velocity_compensate(ego, frames[0]).frame.v).max() < 1e-9
        assert result.labels.shape == (32,)
        assert result.compensated_t.dropped == 0

    def test_deterministic_given_seeds(self):
        rng = np.random.default_rng(21)
        cur, prev = frame_pair(rng)
        eve = EveModel(TINY_EVE, seed=23)
        mos = MosModel(TINY_MOS, seed=24)
        a = predict_pipeline(eve, mos, cur, prev, seed=5)
        b = predict_pipeline(eve, mos, cur, prev, seed=5)
        assert a.v_hat == b.v_hat
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_empty_frame_rejected(self):
        rng = np.random.default_rng(22)
        cur, _ = frame_pair(rng)
        empty = RadarFrame(xyz=np.zeros((0, 3)), v=np.zeros(0))
        eve = EveModel(TINY_EVE, seed=25)
        mos = MosModel(TINY_MOS, seed=26)
        with pytest.raises(ValueError):
            predict_pipeline(eve, mos, cur, empty)

    def test_permutation_invariant_up_to_label_order(self):
        rng = np.random.default_rng(23)
        cur, prev = frame_pair(rng, n=32)
        eve = EveModel(TINY_EVE, seed=27)
        mos = MosModel(TINY_MOS, seed=28)
        base = predict_pipeline(eve, mos, cur, prev, seed=6)
        perm = rng.permutation(32)
        permuted = predict_pipeline(eve, mos, cur.take(perm), prev, seed=6)
        assert permuted.v_hat == pytest.approx(base.v_hat, abs=1e-9)
        np.testing.assert_array_equal(base.labels[perm], permuted.labels)
