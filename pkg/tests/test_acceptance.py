"""Acceptance suite: every release criterion with its stated tolerance.

Each test prints one CRITERION line so a bare ``pytest -v
tests/test_acceptance.py`` doubles as the acceptance report. The two
desk-scale training criteria are marked slow; everything else runs in
seconds.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from radarmotion.autodiff import Tensor, softmax
from radarmotion.attention import VectorAttentionLayer, vector_self_attention
from radarmotion.baselines import (
    DegenerateSceneError,
    IcpConfig,
    RansacConfig,
    icp_velocity,
    ransac_eve,
    threshold_mos,
)
from radarmotion.checks import GRAD_TOL, run_gradient_suite
from radarmotion.geometry import (
    RadarFrame,
    ball_query_all,
    ball_query_sample,
    farthest_point_sample,
    interval_sample,
    knn,
    mix_seed,
    velocity_compensate,
)
from radarmotion.metrics import compute_mos_metrics
from radarmotion.network import doppler_loss
from radarmotion.simulate import (
    SceneConfig,
    build_desk_dataset,
    read_sequence,
    simulate_sequence,
    write_sequence,
)

REPO = Path(__file__).resolve().parent.parent


def report(name: str, ok: bool, detail: str = ""):
    line = f"CRITERION {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)


def noiseless_scene(seed, n_objects=2):
    cfg = SceneConfig(n_static=150, n_objects=n_objects, object_points=(10, 24),
                      object_speed=(0.8, 3.0), ego_speed=2.0 + (seed % 5) * 0.7,
                      velocity_noise=0.0, n_frames=6, seed=seed)
    return simulate_sequence(cfg)


class TestCriterion1SignConvention:
    def test_keystone(self):
        t0 = time.time()
        worst_dop, worst_comp = 0.0, 0.0
        for seed in range(5):
            seq = noiseless_scene(seed)
            for frame in seq.frames:
                static_idx = np.nonzero(frame.labels == 0)[0]
                if static_idx.size == 0:
                    continue
                static = frame.take(static_idx)
                worst_dop = max(worst_dop, doppler_loss(frame.ego_v, static).item())
                comp = velocity_compensate(frame.ego_v, frame)
                resid = np.abs(comp.frame.v[frame.labels[comp.kept] == 0])
                if resid.size:
                    worst_comp = max(worst_comp, float(resid.max()))
        elapsed = time.time() - t0
        ok = worst_dop < 1e-9 and worst_comp < 1e-9 and elapsed < 1.0
        report("1 sign-convention keystone", ok,
               f"doppler={worst_dop:.2e} residual={worst_comp:.2e} {elapsed:.2f}s")
        assert worst_dop < 1e-9
        assert worst_comp < 1e-9
        assert elapsed < 1.0


class TestCriterion2GradientSuite:
    def test_all_blocks(self):
        t0 = time.time()
        results = run_gradient_suite(seed=0)
        elapsed = time.time() - t0
        worst = max(err for _, _, err in results)
        ok = all(passed for _, passed, _ in results) and elapsed < 120.0
        report("2 gradient suite", ok,
               f"{len(results)} blocks, worst rel err {worst:.2e}, {elapsed:.1f}s")
        for name, passed, err in results:
            assert passed, f"{name}: rel err {err:.3e} >= {GRAD_TOL}"
        assert elapsed < 120.0


class TestCriterion3AttentionInvariants:
    def test_invariants(self):
        rng = np.random.default_rng(3)
        # neighbor softmax weights sum to one per channel
        scores = Tensor(rng.standard_normal((40, 16, 8)) * 5)
        sums = softmax(scores, axis=1).data.sum(axis=1)
        weight_gap = float(np.abs(sums - 1.0).max())

        # translation invariance, bitwise, on dyadic 64-point instances
        n = 64
        xyz = (rng.integers(-16, 16, size=(n, 3)) * 0.25).astype(np.float64)
        layer = VectorAttentionLayer(6, rng, "acc")
        feats = Tensor(rng.standard_normal((n, 6)))
        idx = ball_query_all(xyz, xyz, 6.0, 8, seed=5)
        base = vector_self_attention(layer, feats, xyz, idx)
        shifted = vector_self_attention(layer, feats, xyz + np.array([4.0, 8.0, 2.0]), idx)
        bitwise = np.array_equal(base.data, shifted.data)

        # singleton self-neighborhood collapses to the value path exactly
        self_idx = np.arange(n)[:, None]
        singleton = vector_self_attention(layer, feats, xyz, self_idx)
        expect = layer.gamma(feats) + layer.pos.encode(np.zeros((n, 3)))
        singleton_exact = np.allclose(singleton.data, expect.data, atol=1e-12)

        ok = weight_gap < 1e-12 and bitwise and singleton_exact
        report("3 attention invariants", ok,
               f"weight gap {weight_gap:.1e}, translation bitwise={bitwise}, "
               f"singleton exact={singleton_exact}")
        assert weight_gap < 1e-12
        assert bitwise
        assert singleton_exact


class TestCriterion4SamplingContracts:
    def test_contracts(self):
        rng = np.random.default_rng(4)
        k = 16

        # exactly K=16 valid indices from both samplers, dense or sparse
        exact_k = True
        for trial in range(25):
            n = int(rng.integers(3, 80))
            xyz = rng.uniform(-10, 10, size=(n, 3)) + np.array([0, 15, 0])
            frame = RadarFrame(xyz=xyz, v=np.zeros(n))
            q = frame.point(int(rng.integers(n)))
            bq = ball_query_sample(q, frame, radius=3.0, k=k, seed=trial)
            iv = interval_sample(q, frame, g=2, k=k)
            for ns in (bq, iv):
                exact_k &= ns.indices.size == k
                exact_k &= bool(((ns.indices >= 0) & (ns.indices < n)).all())

        # FPS spread against the 1000-random-subset oracle (greedy max-min is
        # a 2-approximation, so demand 95th-percentile dominance, not strict)
        def min_pairwise(xyz, ids):
            pts = xyz[list(ids)]
            d = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
            return d[np.triu_indices(len(ids), 1)].min()

        fps_ok = True
        for trial in range(5):
            crng = np.random.default_rng(100 + trial)
            xyz = np.hstack([crng.uniform(-5, 5, size=(32, 2)), np.zeros((32, 1))])
            frame = RadarFrame(xyz=xyz, v=np.zeros(32))
            ours = min_pairwise(xyz, farthest_point_sample(frame, 4, seed=9))
            spreads = np.array([min_pairwise(xyz, crng.choice(32, 4, replace=False))
                                for _ in range(1000)])
            fps_ok &= bool(ours >= np.percentile(spreads, 95))
            fps_ok &= bool(ours > spreads.mean())

        # kNN equals the exhaustive sort oracle on 200 random instances
        knn_ok = True
        for trial in range(200):
            irng = np.random.default_rng(1000 + trial)
            n = int(irng.integers(2, 257))
            kk = int(irng.integers(1, n + 1))
            xyz = irng.uniform(-10, 10, size=(n, 3)) + np.array([0, 12, 0])
            frame = RadarFrame(xyz=xyz, v=np.zeros(n))
            q = irng.uniform(-10, 10, size=3)
            d = np.linalg.norm(xyz - q, axis=1)
            oracle = sorted(range(n), key=lambda i: (d[i], i))[:kk]
            knn_ok &= bool(np.array_equal(knn(q, frame, kk).indices, oracle))

        ok = exact_k and fps_ok and knn_ok
        report("4 sampling contracts", ok,
               f"K-exactness={exact_k}, fps-vs-oracle={fps_ok}, knn-vs-sort={knn_ok}")
        assert exact_k
        assert fps_ok
        assert knn_ok


class TestCriterion5BaselineOracles:
    def test_oracles(self):
        t0 = time.time()
        rng = np.random.default_rng(5)

        # noiseless static scenes: RANSAC within 1e-6
        ransac_clean = 0.0
        for seed in range(10):
            cfg = SceneConfig(n_static=150, n_objects=0, ego_speed=1.0 + seed * 0.4,
                              velocity_noise=0.0, n_frames=2, seed=seed)
            seq = simulate_sequence(cfg)
            frame = seq.frames[1]
            ransac_clean = max(ransac_clean,
                               abs(ransac_eve(frame, RansacConfig(seed=seed))
                                   - frame.ego_v))

        # 40% movers + velocity noise, 500-frame average
        errs = []
        seq_idx = 0
        while len(errs) < 500:
            cfg = SceneConfig(n_static=150, n_objects=6, object_points=(12, 26),
                              object_speed=(0.8, 3.5),
                              ego_speed=1.0 + (seq_idx % 8) * 0.5,
                              velocity_noise=0.1, dropout=0.1, n_frames=12,
                              seed=3000 + seq_idx)
            for frame in simulate_sequence(cfg).frames:
                if len(frame) < 30 or len(errs) >= 500:
                    continue
                try:
                    errs.append(abs(ransac_eve(frame, RansacConfig(seed=seq_idx))
                                    - frame.ego_v))
                except DegenerateSceneError:
                    pass
            seq_idx += 1
        ransac_noisy = float(np.mean(errs))

        # ICP recovers pure translations to tolerance
        icp_err = 0.0
        for seed in range(5):
            xyz = rng.uniform(-15, 15, size=(80, 3)) + np.array([0, 20, 0])
            prev = RadarFrame(xyz=xyz, v=np.zeros(80))
            shift = float(rng.uniform(0.5, 3.0))
            cur = RadarFrame(xyz=xyz + np.array([0.0, -shift, 0.0]), v=np.zeros(80))
            out = icp_velocity(prev, cur, dt=1.0, config=IcpConfig())
            icp_err = max(icp_err, abs(out.velocity - shift))

        # threshold segmentation perfect on noiseless compensated scenes
        iou = 100.0
        for seed in range(5):
            seq = noiseless_scene(40 + seed, n_objects=3)
            preds, trues = [], []
            for frame in seq.frames:
                comp = velocity_compensate(frame.ego_v, frame)
                true = frame.labels[comp.kept]
                resid = np.abs(comp.frame.v)
                movers = resid[true == 1]
                if movers.size == 0 or movers.min() <= 1e-9:
                    continue  # radially silent mover: excluded by the criterion
                tau = min(0.25, float(movers.min()) / 2)
                preds.append(threshold_mos(comp.frame, tau))
                trues.append(true)
            scores = compute_mos_metrics(np.concatenate(preds), np.concatenate(trues))
            iou = min(iou, scores["avg"].iou)

        elapsed = time.time() - t0
        ok = (ransac_clean < 1e-6 and ransac_noisy < 0.05
              and icp_err < 1e-6 and iou == 100.0 and elapsed < 60.0)
        report("5 baseline oracles", ok,
               f"ransac clean {ransac_clean:.1e}, noisy MAE {ransac_noisy:.4f}, "
               f"icp {icp_err:.1e}, threshold IoU {iou:.1f}, {elapsed:.1f}s")
        assert ransac_clean < 1e-6
        assert ransac_noisy < 0.05
        assert icp_err < 1e-6
        assert iou == 100.0
        assert elapsed < 60.0


@pytest.mark.slow
class TestCriterion6DeskEveTraining:
    """Two asserts are split out: the MAE bound and runtime are attainable;
    beating least-squares-refined RANSAC on clean Gaussian synthetic scenes
    is not (RANSAC sits near the estimation floor there, see the criterion 5
    bound of 0.05 versus this criterion's 0.3 learning bound)."""

    summary = None

    @classmethod
    def _run(cls, tmp_path):
        if cls.summary is None:
            t0 = time.time()
            proc = subprocess.run(
                [sys.executable, str(REPO / "scripts" / "desk_eve_run.py"),
                 "--epochs", "20", "--seed", "42", "--out", str(tmp_path)],
                capture_output=True, text=True, cwd=REPO)
            assert proc.returncode == 0, proc.stderr[-2000:]
            cls.summary = json.loads((tmp_path / "summary.json").read_text())
            cls.summary["wall_minutes"] = (time.time() - t0) / 60
        return cls.summary

    def test_learns_within_bound(self, tmp_path):
        s = self._run(tmp_path)
        mae, ransac_mae = s["test_mae"], s["ransac_mae"]
        ok = mae < 0.3 and s["wall_minutes"] < 30.0
        report("6 desk-scale EVE training", ok and mae < ransac_mae,
               f"test MAE {mae:.4f} (bound 0.3), RANSAC {ransac_mae:.4f}, "
               f"{s['wall_minutes']:.1f} min")
        assert mae < 0.3
        assert s["wall_minutes"] < 30.0

    def test_beats_ransac(self, tmp_path):
        s = self._run(tmp_path)
        assert s["test_mae"] < s["ransac_mae"], (
            f"trained MAE {s['test_mae']:.4f} does not beat refined RANSAC "
            f"{s['ransac_mae']:.4f} on clean Gaussian synthetic scenes")


@pytest.mark.slow
class TestCriterion7DeskMosTraining:
    def test_training_and_ablation(self, tmp_path):
        t0 = time.time()
        proc = subprocess.run(
            [sys.executable, str(REPO / "scripts" / "desk_mos_run.py"),
             "--epochs", "20", "--seed", "42", "--out", str(tmp_path)],
            capture_output=True, text=True, cwd=REPO)
        elapsed = (time.time() - t0) / 60
        assert proc.returncode == 0, proc.stderr[-2000:]
        summary = json.loads((tmp_path / "summary.json").read_text())
        comp = summary["variants"]["compensated"]["test_miou"]
        raw = summary["variants"]["raw"]["test_miou"]
        none = summary["variants"]["none"]["test_miou"]
        baseline = summary["baseline_threshold_miou"]
        ok = comp > baseline and none < raw < comp and elapsed < 45.0
        report("7 desk-scale MOS training", ok,
               f"mIoU comp {comp:.1f} vs baseline {baseline:.1f}; "
               f"ablation none {none:.1f} < raw {raw:.1f} < comp {comp:.1f}; "
               f"{elapsed:.1f} min")
        assert comp > baseline
        assert none < raw < comp
        assert elapsed < 45.0


class TestCriterion8DeterminismAndIO:
    def test_determinism(self, tmp_path):
        from radarmotion.cli import main as cli_main

        # identical seeds: byte-identical dataset directories
        for name in ("a", "b"):
            code = cli_main(["simulate", "--out", str(tmp_path / name),
                             "--sequences", "3", "--frames", "10", "--static", "60",
                             "--objects", "2", "--velocity-noise", "0.1",
                             "--seed", "11"])
            assert code == 0
        identical = all(
            (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
            for rel in ("manifest.csv", "seq_0000/points.csv", "seq_0000/ego.csv",
                        "seq_0001/points.csv", "seq_0002/ego.csv"))

        # CSV round trip is bit exact
        seq = simulate_sequence(SceneConfig(n_static=80, n_objects=2,
                                            velocity_noise=0.07, n_frames=5, seed=12))
        write_sequence(seq, tmp_path / "rt")
        back = read_sequence(tmp_path / "rt")
        round_trip = all(
            np.array_equal(fa.xyz, fb.xyz) and np.array_equal(fa.v, fb.v)
            and np.array_equal(fa.labels, fb.labels)
            and fa.timestamp == fb.timestamp and fa.ego_v == fb.ego_v
            for fa, fb in zip(seq.frames, back.frames))

        # metric identity on an emitted report
        rng = np.random.default_rng(8)
        pred = (rng.uniform(size=400) < 0.4).astype(int)
        true = (rng.uniform(size=400) < 0.3).astype(int)
        scores = compute_mos_metrics(pred, true)
        identity = all(
            abs(scores[c].iou / 100 - (scores[c].f1 / 100) / (2 - scores[c].f1 / 100)) < 1e-12
            for c in ("static", "moving"))

        ok = identical and round_trip and identity
        report("8 determinism and I/O", ok,
               f"dataset bytes identical={identical}, round-trip exact={round_trip}, "
               f"IoU=F1/(2-F1) holds={identity}")
        assert identical
        assert round_trip
        assert identity
