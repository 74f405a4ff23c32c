"""Transfer evaluation, gradient alignment and the regression-based risk estimate.

The risk model regresses the target's restricted transfer success rate on the
surrogate's similarity to the target. Two links are offered:

* ``identity``: ordinary least squares on the raw rates;
* ``logit``: least squares on ``logit(clip(rate, 1e-3, 1 - 1e-3))``.

Predictions are always reported on the rate scale and clipped to [0, 1].
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .attacks import AdversarialBatch, AttackConfig, attack_success, run_attack
from .errors import (ConfigError, DegenerateInputError, IncompleteCoverageError, InstabilityError,
                     InsufficientDataError, RankDeficiencyError, TransferRiskError)
from .matcore import rng_stream
from .selection import SurrogatePools
from .zoo import TrainedModel, input_gradient

LINKS = ("identity", "logit")
LOGIT_CLIP = 1e-3
CI_LEVEL = 0.90
CURVE_POINTS = 101
MAX_FAILED_FRACTION = 0.20
REPORT_SCHEMA = "transferrisk.report/1"
RECORD_FIELDS = ("surrogate", "target", "attack", "n", "similarity", "pool", "surrogate_rate",
                 "target_rate", "target_rate_unrestricted")


@dataclass(frozen=True)
class TransferRecord:
    surrogate_id: str
    target_id: str
    attack: str
    n: int
    surrogate_rate: float
    target_rate: float
    target_rate_unrestricted: float
    similarity: float = float("nan")
    pool: str = ""

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("transfer record needs n >= 1")
        for rate in (self.surrogate_rate, self.target_rate, self.target_rate_unrestricted):
            if not 0 <= rate <= 1:
                raise ConfigError(f"rate {rate} outside [0, 1]")

    def as_row(self):
        return [self.surrogate_id, self.target_id, self.attack, self.n, repr(float(self.similarity)), self.pool,
                repr(self.surrogate_rate), repr(self.target_rate), repr(self.target_rate_unrestricted)]


def evaluate_transfer(surrogate: TrainedModel, target: TrainedModel, batch: AdversarialBatch,
                      similarity=float("nan"), pool="") -> TransferRecord:
    """Score an already crafted batch on both the surrogate and the target."""
    on_surrogate = attack_success(surrogate, batch)
    on_target = attack_success(target, batch)
    return TransferRecord(surrogate.model_id, target.model_id, batch.config.label, len(batch),
                          on_surrogate.restricted, on_target.restricted, on_target.unrestricted,
                          float(similarity), pool)


def transfer_eval(surrogate: TrainedModel, target: TrainedModel, x, y, config: AttackConfig,
                  similarity=float("nan"), pool="") -> TransferRecord:
    batch = run_attack(surrogate, x, y, config)
    return evaluate_transfer(surrogate, target, batch, similarity, pool)


@dataclass(frozen=True)
class Alignment:
    mean_cosine: float
    n_used: int
    n_skipped: int


def gradient_alignment(surrogate: TrainedModel, target: TrainedModel, x, y) -> Alignment:
    """Mean cosine between the two models' per-example input gradients.

    Examples where either gradient is exactly zero are skipped and counted.
    """
    n = len(y)
    ga = input_gradient(surrogate, x, y).reshape(n, -1)
    gb = input_gradient(target, x, y).reshape(n, -1)
    na = np.sqrt(np.sum(ga * ga, axis=1))
    nb = np.sqrt(np.sum(gb * gb, axis=1))
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        raise DegenerateInputError("all input gradients are zero; alignment undefined")
    cos = np.sum(ga[ok] * gb[ok], axis=1) / (na[ok] * nb[ok])
    return Alignment(float(np.clip(cos, -1.0, 1.0).mean()), int(ok.sum()), int(n - ok.sum()))


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class RiskRegression:
    intercept: float
    slope: float
    link: str
    residuals: tuple = field(default=(), compare=False)
    n: int = 0

    def linear(self, s):
        return self.intercept + self.slope * np.asarray(s, dtype=np.float64)

    def predict(self, s):
        """Predicted transfer rate at similarity ``s``, clipped to [0, 1]."""
        z = self.linear(s)
        out = expit(z) if self.link == "logit" else np.clip(z, 0.0, 1.0)
        return float(out) if np.ndim(out) == 0 else out


def _points(points):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ConfigError("points must be a sequence of (similarity, rate) pairs")
    return pts


def fit_risk_regression(points, link="logit") -> RiskRegression:
    if link not in LINKS:
        raise ConfigError(f"unknown link {link!r}; choose from {LINKS}")
    pts = _points(points)
    if len(pts) < 3:
        raise InsufficientDataError(f"regression needs at least 3 points, got {len(pts)}")
    s, rate = pts[:, 0], pts[:, 1]
    if np.ptp(s) == 0:
        raise RankDeficiencyError("all similarities are equal; slope is not identifiable")
    y = logit(np.clip(rate, LOGIT_CLIP, 1 - LOGIT_CLIP)) if link == "logit" else rate
    design = np.column_stack([np.ones_like(s), s])
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < 2:
        raise RankDeficiencyError("design matrix is rank deficient")
    resid = y - design @ coef
    return RiskRegression(float(coef[0]), float(coef[1]), link, tuple(resid.tolist()), len(pts))


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    level: float = CI_LEVEL
    trials: int = 0
    failures: int = 0
    widened: bool = False

    def contains(self, value):
        return self.low <= value <= self.high


def bootstrap_ci(points, statistic, trials=1000, seed=0, level=CI_LEVEL) -> Interval:
    """Percentile bootstrap interval of ``statistic`` over resampled points.

    ``statistic`` receives an ``(n, ...)`` array of resampled rows. Resamples
    on which it raises a toolkit error are counted as failures; more than 20%
    failures raises :class:`InstabilityError`.
    """
    data = np.asarray(points, dtype=np.float64)
    if trials < 100:
        raise ConfigError("bootstrap needs at least 100 trials")
    if len(data) < 3:
        raise InsufficientDataError("bootstrap needs at least 3 points")
    rng = rng_stream(seed)
    n = len(data)
    values, failures = [], 0
    for _ in range(trials):
        idx = rng.integers(0, n, size=n)
        try:
            values.append(float(statistic(data[idx])))
        except TransferRiskError:
            failures += 1
    if failures > MAX_FAILED_FRACTION * trials:
        raise InstabilityError(f"{failures} of {trials} bootstrap resamples failed")
    tail = (1 - level) / 2 * 100
    low, high = np.percentile(values, [tail, 100 - tail])
    return Interval(float(low), float(high), level, trials, failures)


def slope_statistic(link):
    return lambda pts: fit_risk_regression(pts, link).slope


# ---------------------------------------------------------------------------
# report


@dataclass
class RiskReport:
    records: list
    regression: RiskRegression
    curve: list  # (similarity, predicted rate)
    aggregates: dict
    intervals: dict
    metadata: dict
    advisory: str = ""

    def to_dict(self, timestamp=None):
        reg = self.regression
        return {
            "schema": REPORT_SCHEMA,
            "generated_at": timestamp,
            "headline_risk": self.aggregates["worst_case"],
            "aggregates": self.aggregates,
            "confidence_intervals": {k: {"low": v.low, "high": v.high, "level": v.level, "trials": v.trials,
                                         "failures": v.failures, "widened": v.widened}
                                     for k, v in self.intervals.items()},
            "regression": {"link": reg.link, "intercept": reg.intercept, "slope": reg.slope, "n": reg.n,
                           "residuals": list(reg.residuals)},
            "curve": [{"similarity": s, "predicted_rate": p} for s, p in self.curve],
            "records": [dict(zip(RECORD_FIELDS, [r.surrogate_id, r.target_id, r.attack, r.n, r.similarity, r.pool,
                                                 r.surrogate_rate, r.target_rate, r.target_rate_unrestricted]))
                        for r in self.records],
            "advisory": self.advisory,
            "metadata": self.metadata,
        }

    def to_json(self, timestamp=None):
        return json.dumps(self.to_dict(timestamp), indent=2, allow_nan=False) + "\n"


def _covering(ci: Interval, point):
    if ci.contains(point):
        return ci
    return Interval(min(ci.low, point), max(ci.high, point), ci.level, ci.trials, ci.failures, True)


def build_report(pools: SurrogatePools, records, regression: RiskRegression | None = None, *,
                 attacks=None, link="logit", trials=1000, seed=0, metadata=None) -> RiskReport:
    """Assemble the risk report for the pooled surrogates.

    ``attacks`` lists the attack labels every pool member must have been
    evaluated with (defaults to every label present in ``records``).
    """
    records = list(records)
    members = set(pools.members())
    attacks = sorted(set(attacks) if attacks is not None else {r.attack for r in records})
    have = {(r.surrogate_id, r.attack) for r in records}
    gaps = [(sid, a) for sid in sorted(members) for a in attacks if (sid, a) not in have]
    if gaps:
        raise IncompleteCoverageError("missing transfer results for: "
                                      + ", ".join(f"{s}/{a}" for s, a in gaps), gaps=gaps)
    score = dict(pools.m1 + pools.m2)
    pool_of = {sid: "m1" for sid, _ in pools.m1} | {sid: "m2" for sid, _ in pools.m2}
    used = [TransferRecord(r.surrogate_id, r.target_id, r.attack, r.n, r.surrogate_rate, r.target_rate,
                           r.target_rate_unrestricted, score[r.surrogate_id], pool_of[r.surrogate_id])
            for r in records if r.surrogate_id in members and r.attack in attacks]
    used.sort(key=lambda r: (r.pool, -r.similarity, r.surrogate_id, r.attack))

    pts = np.array([[r.similarity, r.target_rate] for r in used])
    if regression is None:
        regression = fit_risk_regression(pts, link)
    rates = pts[:, 1]
    in_m1 = np.array([r.pool == "m1" for r in used])
    r1 = pools.policy.r1
    aggregates = {
        "worst_case": float(rates.max()),
        "mean_m1": float(rates[in_m1].mean()),
        "mean_m2": float(rates[~in_m1].mean()),
        "predicted_at_r1": regression.predict(r1),
    }

    def fit_at(link_, s):
        return lambda p: fit_risk_regression(p, link_).predict(s)

    def ci(data, statistic):
        return bootstrap_ci(data, statistic, trials, seed) if len(data) >= 3 else None

    intervals = {
        "slope": ci(pts, slope_statistic(regression.link)),
        "worst_case": ci(rates[:, None], np.max),
        "mean_m1": ci(rates[in_m1, None], np.mean),
        "mean_m2": ci(rates[~in_m1, None], np.mean),
        "predicted_at_r1": ci(pts, fit_at(regression.link, r1)),
    }
    point = {"slope": regression.slope, **aggregates}
    # too few points to resample: report the degenerate interval at the estimate
    intervals = {k: _covering(v, point[k]) if v is not None else Interval(point[k], point[k], CI_LEVEL, 0, 0)
                 for k, v in intervals.items()}

    grid = np.linspace(0.0, 1.0, CURVE_POINTS)
    curve = [(float(s), float(p)) for s, p in zip(grid, regression.predict(grid))]
    meta = {"thresholds": {"r1": r1, "r2": pools.policy.r2, "method": pools.policy.method},
            "target": pools.target_id, "attacks": attacks,
            "pools": {"m1": [list(t) for t in pools.m1], "m2": [list(t) for t in pools.m2],
                      "excluded": [list(t) for t in pools.excluded]},
            "bootstrap": {"trials": trials, "seed": seed, "level": CI_LEVEL},
            "predicted_at_r1_note": "extrapolation from the fitted curve, not an observed rate"}
    meta.update(metadata or {})
    advisory = ""
    if pools.n < pools.policy.recommended_total:
        advisory = f"only {pools.n} surrogates tested; {pools.policy.recommended_total} or more recommended"
    return RiskReport(used, regression, curve, aggregates, intervals, meta, advisory)


def validate_report(report: RiskReport) -> list:
    """Return a list of violated report invariants (empty when the report is sound)."""
    problems = []
    if any(not 0 <= p <= 1 for _, p in report.curve):
        problems.append("curve value outside [0, 1]")
    if len(report.curve) != CURVE_POINTS:
        problems.append("curve does not have 101 samples")
    point = {"slope": report.regression.slope, **report.aggregates}
    for k, ci in report.intervals.items():
        if not ci.contains(point[k]):
            problems.append(f"interval for {k} excludes its estimate")
    agg = report.aggregates
    if agg["worst_case"] < max(agg["mean_m1"], agg["mean_m2"]):
        problems.append("worst_case below a pool mean")
    rates = [r.target_rate for r in report.records]
    m1 = [r.target_rate for r in report.records if r.pool == "m1"]
    m2 = [r.target_rate for r in report.records if r.pool == "m2"]
    if (not math.isclose(max(rates), agg["worst_case"], abs_tol=1e-12)
            or not math.isclose(sum(m1) / len(m1), agg["mean_m1"], abs_tol=1e-12)
            or not math.isclose(sum(m2) / len(m2), agg["mean_m2"], abs_tol=1e-12)):
        problems.append("aggregates do not match the record table")
    return problems


def records_to_csv(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_FIELDS)
    w.writerows(r.as_row() for r in records)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def records_from_csv(path) -> list:
    with open(path, newline="") as fh:
        return [TransferRecord(r["surrogate"], r["target"], r["attack"], int(r["n"]), float(r["surrogate_rate"]),
                               float(r["target_rate"]), float(r["target_rate_unrestricted"]),
                               float(r["similarity"]), r["pool"])
                for r in csv.DictReader(fh)]


def curve_to_csv(report: RiskReport, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["similarity", "predicted_rate"])
    w.writerows([repr(s), repr(p)] for s, p in report.curve)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
