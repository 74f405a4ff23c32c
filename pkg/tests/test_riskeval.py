import json

import numpy as np
import pytest

from transferrisk import riskeval as R
from transferrisk import zoo
from transferrisk.attacks import AttackConfig, attack_success, pgd
from transferrisk.errors import (ConfigError, DegenerateInputError, IncompleteCoverageError, InstabilityError,
                                 InsufficientDataError, NumericalError, RankDeficiencyError)
from transferrisk.selection import SurrogatePools, ThresholdPolicy
from conftest import random_net

PGD = AttackConfig("pgd", 0.1, 0.01, 20)


def ols_oracle(x, y):
    """Closed-form simple regression: slope = cov(x, y) / var(x)."""
    xm, ym = sum(x) / len(x), sum(y) / len(y)
    slope = sum((a - xm) * (b - ym) for a, b in zip(x, y)) / sum((a - xm) ** 2 for a in x)
    return ym - slope * xm, slope


def noisy_line(seed, slope=0.8, n=20, sigma=0.02):
    rng = np.random.default_rng(seed)
    s = np.linspace(0.1, 0.9, n)
    return np.column_stack([s, slope * s + rng.normal(0, sigma, n)])


class TestTransfer:
    def test_copy_of_target(self, blob_models, blobs):
        x, y = blobs.test()
        target = blob_models["target"]
        copy = zoo.TrainedModel(target.descriptor, target.params, {})
        rec = R.transfer_eval(copy, target, x, y, PGD)
        white = attack_success(target, pgd(target, x, y, PGD))
        assert rec.target_rate == white.restricted == rec.surrogate_rate
        assert rec.target_rate_unrestricted == white.unrestricted

    def test_zero_epsilon(self, blob_models, blobs):
        x, y = blobs.test()
        rec = R.transfer_eval(blob_models["wide"], blob_models["target"], x, y, AttackConfig("fgsm", 0.0))
        assert rec.target_rate == 0.0

    def test_higher_similarity_transfers_at_least_as_well(self, example_run):
        _, report = example_run
        pgd_recs = [r for r in report.records if r.attack.startswith("pgd")]
        hi = max(pgd_recs, key=lambda r: r.similarity)
        lo = min(pgd_recs, key=lambda r: r.similarity)
        assert hi.target_rate >= lo.target_rate

    def test_record_validation(self):
        with pytest.raises(ConfigError):
            R.TransferRecord("s", "t", "a", 0, 0.1, 0.1, 0.1)
        with pytest.raises(ConfigError):
            R.TransferRecord("s", "t", "a", 5, 1.2, 0.1, 0.1)


class TestAlignment:
    def test_self(self, blob_models, blobs):
        x, y = blobs.test()
        a = R.gradient_alignment(blob_models["target"], blob_models["target"], x, y)
        assert abs(a.mean_cosine - 1) <= 1e-9

    def test_negated_binary_readout(self):
        rng = np.random.default_rng(4)
        model = random_net(rng, input_dim=4, classes=2)
        neg = zoo.TrainedModel(model.descriptor, model.params[:-1] + [tuple(-p for p in model.params[-1])], {})
        x, y = rng.random((30, 4)), rng.integers(0, 2, 30)
        assert abs(R.gradient_alignment(model, neg, x, y).mean_cosine + 1) <= 1e-6

    def test_dot_product_oracle_and_symmetry(self):
        rng = np.random.default_rng(9)
        a, b = random_net(rng), random_net(rng, depth=3)
        x, y = rng.random((25, 5)), rng.integers(0, 3, 25)
        ga, gb = zoo.input_gradient(a, x, y), zoo.input_gradient(b, x, y)
        cos = [float(u @ v) / (np.sqrt(u @ u) * np.sqrt(v @ v)) for u, v in zip(ga, gb)]
        got = R.gradient_alignment(a, b, x, y)
        assert abs(got.mean_cosine - np.mean(cos)) <= 1e-10
        assert -1 <= got.mean_cosine <= 1 and got.n_used == 25
        assert abs(R.gradient_alignment(b, a, x, y).mean_cosine - got.mean_cosine) <= 1e-10

    def test_all_zero_gradients(self):
        model = zoo.untrained(zoo.mlp("dead", 2, 2, (2,)))
        model.params = [(np.zeros((2, 2)), -np.ones(2)), model.params[1]]
        with pytest.raises(DegenerateInputError):
            R.gradient_alignment(model, model, np.full((3, 2), 0.5), [0, 1, 0])


class TestRegression:
    def test_exact_line(self):
        s = np.array([0.1, 0.3, 0.5, 0.9])
        fit = R.fit_risk_regression(np.column_stack([s, 0.5 * s + 0.1]), "identity")
        assert abs(fit.slope - 0.5) <= 1e-9 and abs(fit.intercept - 0.1) <= 1e-9

    def test_constant_rates(self):
        for link in R.LINKS:
            fit = R.fit_risk_regression([(0.2, 0.3), (0.5, 0.3), (0.7, 0.3)], link)
            assert abs(fit.slope) <= 1e-9

    def test_noisy_slope_at_seed_42(self):
        pts = noisy_line(42)
        fit = R.fit_risk_regression(pts, "identity")
        intercept, slope = ols_oracle(pts[:, 0].tolist(), pts[:, 1].tolist())
        assert 0.7 <= fit.slope <= 0.9
        assert abs(fit.slope - slope) <= 1e-9 and abs(fit.intercept - intercept) <= 1e-9

    def test_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pts = np.column_stack([rng.random(12), rng.random(12)])
            fit = R.fit_risk_regression(pts, "identity")
            intercept, slope = ols_oracle(pts[:, 0].tolist(), pts[:, 1].tolist())
            assert abs(fit.slope - slope) <= 1e-9 and abs(fit.intercept - intercept) <= 1e-9

    def test_logit_link(self):
        s = np.array([0.1, 0.4, 0.7, 0.95])
        rates = 1 / (1 + np.exp(-(-2 + 3 * s)))
        fit = R.fit_risk_regression(np.column_stack([s, rates]), "logit")
        assert abs(fit.slope - 3) <= 1e-9 and abs(fit.intercept + 2) <= 1e-9
        assert np.all((fit.predict(np.linspace(0, 1, 11)) >= 0) & (fit.predict(np.linspace(0, 1, 11)) <= 1))
        # rates of exactly 0 or 1 are clipped rather than sent to infinity
        assert np.isfinite(R.fit_risk_regression([(0.1, 0.0), (0.5, 1.0), (0.9, 1.0)]).slope)

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            R.fit_risk_regression([(0.1, 0.2), (0.4, 0.5)])
        with pytest.raises(RankDeficiencyError):
            R.fit_risk_regression([(0.4, 0.2), (0.4, 0.5), (0.4, 0.1)])
        with pytest.raises(ConfigError):
            R.fit_risk_regression([(0.1, 0.2), (0.2, 0.3), (0.3, 0.1)], "probit")


class TestBootstrap:
    def test_zero_noise(self):
        s = np.linspace(0.1, 0.9, 10)
        ci = R.bootstrap_ci(np.column_stack([s, 0.8 * s]), R.slope_statistic("identity"), 500, 3)
        assert ci.high - ci.low <= 1e-6 and abs(ci.low - 0.8) <= 1e-6

    def test_deterministic(self):
        pts = noisy_line(5)
        assert R.bootstrap_ci(pts, R.slope_statistic("identity"), 300, 8) == \
            R.bootstrap_ci(pts, R.slope_statistic("identity"), 300, 8)

    def test_contains_true_slope(self):
        ci = R.bootstrap_ci(noisy_line(42), R.slope_statistic("identity"), 1000, 0)
        assert ci.contains(0.8) and ci.level == 0.9

    def test_failures_counted_then_fatal(self):
        pts = np.column_stack([np.r_[np.full(9, 0.5), 0.9], np.linspace(0, 1, 10)])
        # resamples missing the single distinct similarity fail: (9/10)^10 ~ 35% > 20%
        with pytest.raises(InstabilityError):
            R.bootstrap_ci(pts, R.slope_statistic("identity"), 500, 0)

        def flaky(d):
            if d[0, 0] < 0.05:
                raise NumericalError("unlucky draw")
            return d[:, 1].mean()

        ci = R.bootstrap_ci(np.column_stack([np.linspace(0, 1, 10), np.ones(10)]), flaky, 500, 0)
        assert 0 < ci.failures <= 100

    def test_argument_checks(self):
        with pytest.raises(ConfigError):
            R.bootstrap_ci(noisy_line(1), np.mean, 50)
        with pytest.raises(InsufficientDataError):
            R.bootstrap_ci([[0.1, 0.2]], np.mean)


def pools(m1, m2, excluded=()):
    return SurrogatePools("t", ThresholdPolicy(), tuple(m1), tuple(m2), tuple(excluded))


def rec(sid, rate, attack="fgsm-eps0.1"):
    return R.TransferRecord(sid, "t", attack, 100, 0.9, rate, rate)


class TestReport:
    def test_arithmetic(self):
        reg = R.RiskRegression(0.0, 0.5, "identity")
        report = R.build_report(pools([("a", 0.7)], [("b", 0.2)]), [rec("a", 0.6), rec("b", 0.2)], reg)
        assert report.aggregates["worst_case"] == 0.6
        assert report.aggregates["mean_m1"] == 0.6 and report.aggregates["mean_m2"] == 0.2
        assert report.aggregates["predicted_at_r1"] == pytest.approx(0.275)
        assert R.validate_report(report) == []
        assert "recommended" in report.advisory

    def test_all_zero(self):
        p = pools([("a", 0.8), ("b", 0.6)], [("c", 0.3), ("d", 0.1)])
        report = R.build_report(p, [rec(s, 0.0) for s in "abcd"], link="identity", trials=200)
        assert all(v == 0 for v in report.aggregates.values())
        assert {v for _, v in report.curve} == {0.0}
        assert R.validate_report(report) == []

    def test_aggregates_recomputed_independently(self):
        rng = np.random.default_rng(2)
        p = pools([("a", 0.8), ("b", 0.6), ("e", 0.57)], [("c", 0.3), ("d", 0.1)])
        recs = [rec(s, float(rng.random()), a) for s in "abcde" for a in ("fgsm-eps0.1", "pgd-x")]
        report = R.build_report(p, recs, trials=200)
        rates = {r.surrogate_id + r.attack: r.target_rate for r in recs}
        m1 = [rates[s + a] for s in "abe" for a in ("fgsm-eps0.1", "pgd-x")]
        m2 = [rates[s + a] for s in "cd" for a in ("fgsm-eps0.1", "pgd-x")]
        assert report.aggregates["worst_case"] == max(rates.values())
        assert report.aggregates["mean_m1"] == pytest.approx(sum(m1) / len(m1), abs=1e-12)
        assert report.aggregates["mean_m2"] == pytest.approx(sum(m2) / len(m2), abs=1e-12)
        assert len(report.curve) == 101 and report.curve[0][0] == 0.0 and report.curve[-1][0] == 1.0
        for key, ci in report.intervals.items():
            assert ci.contains(({"slope": report.regression.slope} | report.aggregates)[key])

    def test_coverage_gap(self):
        p = pools([("a", 0.8)], [("b", 0.2), ("c", 0.1)])
        recs = [rec("a", 0.5), rec("b", 0.1), rec("a", 0.6, "pgd-x"), rec("b", 0.2, "pgd-x"), rec("c", 0.1)]
        with pytest.raises(IncompleteCoverageError) as err:
            R.build_report(p, recs)
        assert list(err.value.gaps) == [("c", "pgd-x")]

    def test_example_run_validates(self, example_run):
        _, report = example_run
        assert R.validate_report(report) == []
        pts = [(r.similarity, r.target_rate) for r in report.records]
        assert report.regression == R.fit_risk_regression(pts, report.regression.link)
        doc = json.loads(report.to_json("fixed"))
        assert list(doc) == ["schema", "generated_at", "headline_risk", "aggregates", "confidence_intervals",
                             "regression", "curve", "records", "advisory", "metadata"]
        assert doc["headline_risk"] == report.aggregates["worst_case"]

    def test_csv_round_trip(self, example_run, tmp_path):
        _, report = example_run
        R.records_to_csv(report.records, tmp_path / "r.csv")
        assert R.records_from_csv(tmp_path / "r.csv") == report.records
        lines = R.curve_to_csv(report).splitlines()
        assert lines[0] == "similarity,predicted_rate" and len(lines) == 102
