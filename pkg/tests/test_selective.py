import numpy as np
import pytest

from uatlite.calibration import PredictionRecord
from uatlite.selective import (
    DEFAULT_THRESHOLDS,
    InfeasiblePolicyError,
    coverage_at_threshold,
    load_thresholds,
    risk_coverage,
    save_thresholds,
    select_thresholds,
)


def recs(conf, correct, ids=None):
    ids = range(len(conf)) if ids is None else ids
    return [PredictionRecord(i, 1 if c else 0, float(f), 1) for i, f, c in zip(ids, conf, correct)]


def brute_aurc(conf, correct):
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], i))
    n = len(order)
    risks = []
    for k in range(1, n + 1):
        top = order[:k]
        risks.append(sum(0 if correct[i] else 1 for i in top) / k)
    return sum(risks) / n


def ranked_aurc(correct_in_order):
    """AURC of a fixed acceptance order."""
    errs = np.cumsum([0 if c else 1 for c in correct_in_order])
    return float(np.mean(errs / np.arange(1, len(errs) + 1)))


class TestCoverage:
    def test_all_accepted(self):
        assert coverage_at_threshold(recs([0.9, 0.95], [1, 0]), 0.5)["coverage"] == 1.0

    def test_hand_count(self):
        out = coverage_at_threshold(recs([0.95, 0.85, 0.75, 0.6], [1, 0, 1, 1]), 0.8)
        assert out["coverage"] == 0.5
        assert out["selective_accuracy"] == 0.5

    def test_nothing_accepted(self):
        out = coverage_at_threshold(recs([0.9, 0.99], [1, 1]), 1.0)
        assert out["coverage"] == 0.0 and out["selective_accuracy"] is None

    @pytest.mark.parametrize("tau", [0.0, -0.2, 1.1])
    def test_invalid_tau(self, tau):
        with pytest.raises(ValueError):
            coverage_at_threshold(recs([0.5], [1]), tau)

    def test_nonincreasing_in_tau(self):
        rng = np.random.default_rng(0)
        r = recs(rng.random(200), rng.random(200) < 0.7)
        covs = [coverage_at_threshold(r, t)["coverage"] for t in np.linspace(0.01, 1.0, 50)]
        assert all(a >= b for a, b in zip(covs, covs[1:]))


class TestRiskCoverage:
    def test_hand_fixture(self):
        c = risk_coverage(recs([0.9, 0.8, 0.7], [1, 0, 1]))
        np.testing.assert_allclose(c.risk, [0, 0.5, 1 / 3])
        assert c.aurc == pytest.approx(0.2778, abs=1e-4)

    def test_all_correct_and_all_wrong(self):
        assert risk_coverage(recs([0.9, 0.6, 0.7], [1, 1, 1])).aurc == 0.0
        assert risk_coverage(recs([0.9, 0.6, 0.7], [0, 0, 0])).aurc == 1.0

    def test_empty(self):
        with pytest.raises(ValueError):
            risk_coverage([])

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 101))
            conf = np.round(rng.random(n), 1)  # coarse values force ties
            correct = rng.random(n) < 0.6
            curve = risk_coverage(recs(conf, correct))
            assert abs(curve.aurc - brute_aurc(list(conf), list(correct))) <= 1e-12
            assert np.all(np.diff(curve.coverage) > 0)
            assert np.all((curve.risk >= 0) & (curve.risk <= 1))
            assert abs(np.mean([p["risk"] for p in curve.points]) - curve.aurc) <= 1e-12

    def test_oracle_ranking_is_minimal(self):
        rng = np.random.default_rng(8)
        correct = list(rng.random(60) < 0.65)
        best = ranked_aurc(sorted(correct, reverse=True))
        for _ in range(100):
            assert best <= ranked_aurc(list(rng.permutation(correct)))

    def test_better_than_random(self):
        rng = np.random.default_rng(9)
        conf = rng.random(400)
        correct = rng.random(400) < conf  # confidence correlates with correctness
        curve = risk_coverage(recs(conf, correct))
        rand = [ranked_aurc(list(rng.permutation(correct))) for _ in range(20)]
        assert curve.aurc < np.mean(rand) - 0.02

    def test_ties_broken_by_example_id(self):
        a = risk_coverage(recs([0.5, 0.5, 0.5], [0, 1, 1], ids=["b", "a", "c"]))
        b = risk_coverage(recs([0.5, 0.5, 0.5], [1, 0, 1], ids=["a", "b", "c"]))
        np.testing.assert_array_equal(a.risk, b.risk)
        np.testing.assert_allclose(a.risk, [0, 0.5, 1 / 3])

    def test_coverage_at_defaults_and_exports(self, tmp_path):
        c = risk_coverage(recs([0.95, 0.85, 0.75, 0.6], [1, 0, 1, 1]))
        assert set(c.coverage_at) == {0.9, 0.8, 0.7}
        assert c.coverage_at[0.8] == 0.5
        c.write_csv(tmp_path / "rc.csv")
        c.write_summary(tmp_path / "s.json")
        assert (tmp_path / "rc.csv").read_text().splitlines()[0] == "coverage,risk"
        assert "coverage@0.9" in (tmp_path / "s.json").read_text()


class TestThresholds:
    def test_default(self):
        assert select_thresholds(recs([0.5], [1])) == DEFAULT_THRESHOLDS == (0.9, 0.8, 0.7)

    def test_full_coverage_target_is_min_confidence(self):
        conf = [0.91, 0.55, 0.73, 0.62]
        (tau,) = select_thresholds(recs(conf, [1] * 4), {"coverage_targets": [1.0]})
        assert tau == min(conf)

    def test_coverage_target_met_on_validation(self):
        rng = np.random.default_rng(1)
        val = recs(rng.random(101), [1] * 101)
        taus = select_thresholds(val, {"coverage_targets": [0.25, 0.5, 0.9]})
        for c, t in zip([0.25, 0.5, 0.9], taus):
            assert coverage_at_threshold(val, t)["coverage"] >= c

    @pytest.mark.parametrize("policy", [{"coverage_targets": [0.0]}, {"coverage_targets": [1.5]}, "quantile"])
    def test_infeasible(self, policy):
        with pytest.raises(InfeasiblePolicyError):
            select_thresholds(recs([0.5, 0.6], [1, 0]), policy)

    def test_round_trip(self, tmp_path):
        taus = (0.9123456789012345, 0.1 + 0.2, 0.7)
        save_thresholds(tmp_path / "t.json", taus)
        assert load_thresholds(tmp_path / "t.json") == taus
