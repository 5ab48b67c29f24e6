import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radarmotion.metrics import MetricsReport, compute_eve_metrics, compute_mos_metrics


class TestMosMetrics:
    def test_perfect_prediction(self):
        labels = np.array([0, 1, 0, 1, 1])
        scores = compute_mos_metrics(labels, labels)
        for name in ("static", "moving", "avg"):
            assert scores[name].iou == 100.0
            assert scores[name].f1 == 100.0
            assert scores[name].acc == 100.0

    def test_formula_arithmetic(self):
        # moving: TP=1, FP=1, FN=0
        pred = np.array([1, 1])
        true = np.array([1, 0])
        s = compute_mos_metrics(pred, true)["moving"]
        assert s.iou == pytest.approx(50.0)
        assert s.f1 == pytest.approx(200.0 / 3.0)

    def test_all_static_on_balanced_truth(self):
        true = np.array([0, 0, 1, 1])
        pred = np.zeros(4, dtype=int)
        scores = compute_mos_metrics(pred, true)
        assert scores["moving"].iou == 0.0
        assert scores["static"].iou == pytest.approx(50.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_mos_metrics(np.array([]), np.array([]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_mos_metrics(np.array([0]), np.array([0, 1]))

    @given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)),
                    min_size=1, max_size=60))
    @settings(max_examples=60, deadline=None)
    def test_iou_f1_identity(self, pairs):
        pred = np.array([p for p, _ in pairs])
        true = np.array([t for _, t in pairs])
        scores = compute_mos_metrics(pred, true)
        for name in ("static", "moving"):
            f1 = scores[name].f1 / 100.0
            iou = scores[name].iou / 100.0
            assert iou == pytest.approx(f1 / (2.0 - f1), abs=1e-12)


class TestEveMetrics:
    def test_precision_fraction(self):
        out = compute_eve_metrics([0.05, 0.2, 0.4], [0.0, 0.0, 0.0])
        assert out["precision"][0.3] == pytest.approx(2.0 / 3.0)

    def test_zero_errors(self):
        out = compute_eve_metrics([1.0, 2.0], [1.0, 2.0])
        assert out["mae"] == 0.0
        assert out["mse"] == 0.0
        assert all(v == 1.0 for v in out["precision"].values())

    def test_unit_errors(self):
        out = compute_eve_metrics([1.0, -1.0], [0.0, 0.0])
        assert out["mae"] == 1.0
        assert out["mse"] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_eve_metrics([], [])

    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=40))
    @settings(max_examples=40, deadline=None)
    def test_precision_monotone_in_tau(self, errors):
        out = compute_eve_metrics(errors, [0.0] * len(errors),
                                  thresholds=(0.1, 0.3, 0.5, 1.0))
        taus = sorted(out["precision"])
        precs = [out["precision"][t] for t in taus]
        assert all(b >= a for a, b in zip(precs, precs[1:]))


class TestReport:
    def _report(self):
        pred = np.array([0, 1, 1, 0, 1, 0, 0, 1])
        true = np.array([0, 1, 0, 0, 1, 1, 0, 1])
        return MetricsReport(
            mos=compute_mos_metrics(pred, true),
            eve=compute_eve_metrics([1.0, 2.1], [1.05, 2.0]),
            acc_overall=100.0 * (pred == true).mean(),
            n_points=8, n_pairs=2, cfg_hash="abc123",
        )

    def test_validate_passes(self):
        self._report().validate()

    def test_kv_and_table_stable(self, tmp_path):
        r = self._report()
        r.write(tmp_path / "report")
        a = (tmp_path / "report.kv").read_bytes()
        b = (tmp_path / "report.txt").read_bytes()
        r.write(tmp_path / "report")
        assert (tmp_path / "report.kv").read_bytes() == a
        assert (tmp_path / "report.txt").read_bytes() == b

    def test_kv_contains_identity_consistent_values(self, tmp_path):
        r = self._report()
        kv = {line.split("=")[0]: line.split("=", 1)[1] for line in r.kv_lines()}
        for name in ("static", "moving"):
            f1 = float(kv[f"f1_{name}"]) / 100.0
            iou = float(kv[f"iou_{name}"]) / 100.0
            assert iou == pytest.approx(f1 / (2.0 - f1), abs=1e-12)

    def test_validate_rejects_corrupt(self):
        r = self._report()
        from radarmotion.metrics import ClassScores
        r.mos["static"] = ClassScores(iou=40.0, f1=80.0, acc=50.0)
        with pytest.raises(ValueError):
            r.validate()
