import numpy as np
import pytest

from radarmotion.baselines import (
    DegenerateSceneError,
    IcpConfig,
    RansacConfig,
    icp_velocity,
    ransac_eve,
    threshold_mos,
)
from radarmotion.geometry import RadarFrame, velocity_compensate
from radarmotion.simulate import SceneConfig, simulate_sequence


def static_scene_frame(rng, n, ego):
    xyz = rng.uniform(-20, 20, size=(n, 3))
    xyz[:, 1] = np.abs(xyz[:, 1]) + 2.0
    norm = np.linalg.norm(xyz, axis=1)
    return RadarFrame(xyz=xyz, v=ego * xyz[:, 1] / norm, ego_v=ego)


class TestRansac:
    def test_noiseless_static(self):
        rng = np.random.default_rng(0)
        frame = static_scene_frame(rng, 100, ego=3.0)
        assert ransac_eve(frame) == pytest.approx(3.0, abs=1e-9)

    def test_noiseless_static_any_seed(self):
        rng = np.random.default_rng(1)
        frame = static_scene_frame(rng, 80, ego=-1.5)
        for seed in range(10):
            v = ransac_eve(frame, RansacConfig(seed=seed))
            assert v == pytest.approx(-1.5, abs=1e-6)

    def test_survives_coherent_movers(self):
        # 60 static + 40 points on an oncoming object; its radial residuals
        # sit far outside the inlier band, so the consensus stays static
        rng = np.random.default_rng(2)
        ego = 3.0
        static = static_scene_frame(rng, 60, ego)
        mover_xyz = rng.uniform(-10, 10, size=(40, 3))
        mover_xyz[:, 1] = np.abs(mover_xyz[:, 1]) + 3.0
        obj_v = np.array([0.0, -4.0, 0.0])
        ego_v = np.array([0.0, ego, 0.0])
        norm = np.linalg.norm(mover_xyz, axis=1)
        mv = ((ego_v - obj_v)[None, :] * mover_xyz).sum(axis=1) / norm
        frame = RadarFrame(xyz=np.vstack([static.xyz, mover_xyz]),
                           v=np.concatenate([static.v, mv]))
        assert ransac_eve(frame) == pytest.approx(ego, abs=1e-6)

    def test_all_movers_returns_consensus(self):
        # every return comes from one rigid mover going straight along +y:
        # RANSAC happily reports the relative speed, the documented failure
        rng = np.random.default_rng(3)
        ego = 2.0
        obj_v = np.array([0.0, 5.0, 0.0])
        xyz = rng.uniform(-5, 5, size=(50, 3))
        xyz[:, 1] = np.abs(xyz[:, 1]) + 5.0
        norm = np.linalg.norm(xyz, axis=1)
        v = ((np.array([0, ego, 0]) - obj_v)[None, :] * xyz).sum(axis=1) / norm
        frame = RadarFrame(xyz=xyz, v=v)
        assert ransac_eve(frame) == pytest.approx(ego - 5.0, abs=1e-6)

    def test_degenerate_when_nothing_agrees(self):
        rng = np.random.default_rng(4)
        xyz = rng.uniform(-10, 10, size=(40, 3))
        xyz[:, 1] = np.abs(xyz[:, 1]) + 2.0
        v = rng.uniform(-40, 40, size=40)  # incoherent velocities
        frame = RadarFrame(xyz=xyz, v=v)
        with pytest.raises(DegenerateSceneError):
            ransac_eve(frame, RansacConfig(inlier_threshold=0.01, min_inlier_ratio=0.3))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(5)
        frame = static_scene_frame(rng, 70, ego=2.2)
        frame = RadarFrame(xyz=frame.xyz, v=frame.v + rng.normal(0, 0.1, 70))
        perm = rng.permutation(70)
        a = ransac_eve(frame, RansacConfig(seed=9))
        b = ransac_eve(frame.take(perm), RansacConfig(seed=9))
        assert a == pytest.approx(b, abs=1e-6)

    def test_noisy_scene_with_movers(self):
        cfg = SceneConfig(n_static=180, n_objects=3, object_speed=(1.0, 3.0),
                          ego_speed=3.0, velocity_noise=0.1, n_frames=10, seed=6)
        seq = simulate_sequence(cfg)
        errs = [abs(ransac_eve(f) - f.ego_v) for f in seq.frames if len(f) > 20]
        assert np.mean(errs) < 0.05


class TestIcp:
    def test_identical_frames_zero_velocity(self):
        rng = np.random.default_rng(7)
        frame = static_scene_frame(rng, 40, ego=0.0)
        out = icp_velocity(frame, frame, dt=0.5)
        assert out.velocity == pytest.approx(0.0, abs=1e-12)
        assert out.converged

    def test_known_translation(self):
        rng = np.random.default_rng(8)
        prev = static_scene_frame(rng, 60, ego=0.0)
        cur = RadarFrame(xyz=prev.xyz + np.array([0.0, -2.0, 0.0]), v=prev.v)
        out = icp_velocity(prev, cur, dt=1.0)
        assert out.velocity == pytest.approx(2.0, abs=1e-6)
        np.testing.assert_allclose(out.translation, [0.0, -2.0, 0.0], atol=1e-6)

    def test_heavy_dropout_static_scene(self):
        cfg = SceneConfig(n_static=400, n_objects=0, ego_speed=2.0,
                          dropout=0.5, n_frames=2, frame_rate=10.0, seed=9)
        seq = simulate_sequence(cfg)
        out = icp_velocity(seq.frames[0], seq.frames[1], dt=0.1,
                           config=IcpConfig(max_correspondence=1.0))
        assert abs(out.velocity - 2.0) < 0.5

    def test_too_few_points(self):
        frame = RadarFrame(xyz=[[0, 1, 0], [0, 2, 0]], v=[0, 0])
        with pytest.raises(ValueError):
            icp_velocity(frame, frame, dt=0.1)

    def test_bad_dt(self):
        rng = np.random.default_rng(10)
        frame = static_scene_frame(rng, 10, ego=0.0)
        with pytest.raises(ValueError):
            icp_velocity(frame, frame, dt=0.0)


class TestThresholdMos:
    def test_zero_residual_is_static(self):
        frame = RadarFrame(xyz=[[0, 5, 0]], v=[0.0])
        assert threshold_mos(frame, 0.25)[0] == 0

    def test_large_residual_is_moving(self):
        frame = RadarFrame(xyz=[[0, 5, 0]], v=[1.0])
        assert threshold_mos(frame, 0.25)[0] == 1

    def test_boundary_is_static(self):
        frame = RadarFrame(xyz=[[0, 5, 0]], v=[0.25])
        assert threshold_mos(frame, 0.25)[0] == 0

    def test_perfect_on_compensated_noiseless_scene(self):
        cfg = SceneConfig(n_static=150, n_objects=3, object_speed=(1.0, 3.0),
                          ego_speed=2.0, n_frames=8, seed=11)
        seq = simulate_sequence(cfg)
        for frame in seq.frames:
            comp = velocity_compensate(frame.ego_v, frame)
            resid = np.abs(comp.frame.v)
            movers = frame.labels[comp.kept] == 1
            if not movers.any():
                continue
            smallest_mover = resid[movers].min()
            if smallest_mover <= 1e-9:  # mover radially indistinguishable
                continue
            tau = min(0.25, smallest_mover / 2)
            pred = threshold_mos(comp.frame, tau)
            np.testing.assert_array_equal(pred, frame.labels[comp.kept])
