"""Surrogate pool construction from similarity scores against one target.

Given thresholds ``0 < r2 < r1 < 1``::

    M1 = {S | sim(S, target) >= r1}    high-similarity pool
    M2 = {S | sim(S, target) <= r2}    low-similarity pool

Surrogates strictly between the thresholds are excluded from testing but kept
in the result for reporting. ``n`` counts trained surrogate instances, so two
seeds of one architecture count twice.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, InsufficientPoolError, PolicyError

# empirical CKA range for common CNNs is roughly 0.32-0.57 (median ~0.45)
DEFAULT_THRESHOLDS = {"cka_linear": (0.55, 0.35), "cka_rbf": (0.55, 0.35), "diag_band": (0.7, 0.45)}


@dataclass(frozen=True)
class ThresholdPolicy:
    r1: float = 0.55
    r2: float = 0.35
    min_m1: int = 1
    min_m2: int = 1
    min_total: int = 3
    recommended_total: int = 5
    method: str = "cka_linear"

    def __post_init__(self):
        if not 0 < self.r2 < self.r1 < 1:
            raise PolicyError(f"thresholds must satisfy 0 < r2 < r1 < 1, got r1={self.r1}, r2={self.r2}")
        if self.min_m1 < 1 or self.min_m2 < 1:
            raise PolicyError("each pool needs a minimum of at least 1 surrogate")
        if self.min_total <= 2:
            raise PolicyError("at least 3 surrogates must be tested in total (min_total > 2)")
        if self.method not in DEFAULT_THRESHOLDS:
            raise PolicyError(f"unknown similarity method {self.method!r}")

    @classmethod
    def for_method(cls, method, **overrides):
        """Policy with the default thresholds for ``method``."""
        if method not in DEFAULT_THRESHOLDS:
            raise PolicyError(f"unknown similarity method {method!r}")
        r1, r2 = DEFAULT_THRESHOLDS[method]
        return cls(**{"r1": r1, "r2": r2, "method": method, **overrides})


@dataclass(frozen=True)
class SurrogatePools:
    target_id: str
    policy: ThresholdPolicy
    m1: tuple  # (surrogate id, score), descending score then id
    m2: tuple
    excluded: tuple

    @property
    def n(self):
        return len(self.m1) + len(self.m2)

    def members(self):
        return [sid for sid, _ in self.m1 + self.m2]

    def pool_of(self, surrogate_id):
        for name in ("m1", "m2", "excluded"):
            if any(sid == surrogate_id for sid, _ in getattr(self, name)):
                return name
        raise KeyError(surrogate_id)


@dataclass(frozen=True)
class Advisory:
    below_recommended: bool
    total: int
    recommended: int
    message: str


def _ordered(items):
    return tuple(sorted(items, key=lambda t: (-t[1], t[0])))


def partition(scores: dict, r1: float, r2: float):
    """Split ``{surrogate: score}`` into (m1, m2, excluded) with inclusive bounds."""
    m1 = _ordered((s, v) for s, v in scores.items() if v >= r1)
    m2 = _ordered((s, v) for s, v in scores.items() if v <= r2)
    mid = _ordered((s, v) for s, v in scores.items() if r2 < v < r1)
    return m1, m2, mid


def select_pools(records, policy: ThresholdPolicy = ThresholdPolicy(), target_id: str | None = None) -> SurrogatePools:
    """Partition similarity records against one target into M1, M2 and excluded.

    Records are read with the target as ``model_a`` unless ``target_id`` is
    given, in which case the surrogate is whichever id is not the target.
    """
    records = list(records)
    if not records:
        raise ConfigError("no similarity records to select from")
    if not 0 < policy.r2 < policy.r1 < 1:
        raise PolicyError(f"thresholds must satisfy 0 < r2 < r1 < 1, got r1={policy.r1}, r2={policy.r2}")
    target = target_id or records[0].model_a
    scores = {}
    for r in records:
        if target not in (r.model_a, r.model_b):
            raise ConfigError(f"record {r.model_a}/{r.model_b} does not involve target {target}")
        if r.method != policy.method:
            raise ConfigError(f"record method {r.method} does not match policy method {policy.method}")
        if not 0 <= r.score <= 1:
            raise ConfigError(f"score {r.score} outside [0, 1]")
        sid = r.other(target)
        if sid == target:
            raise ConfigError(f"target {target} compared against itself")
        if sid in scores:
            raise ConfigError(f"duplicate similarity record for surrogate {sid}")
        scores[sid] = r.score

    m1, m2, excluded = partition(scores, policy.r1, policy.r2)
    if len(m1) < policy.min_m1:
        near = list(excluded[:3])
        raise InsufficientPoolError(
            f"M1 has {len(m1)} surrogate(s) with similarity >= {policy.r1}, need {policy.min_m1}; "
            f"nearest misses: {_fmt(near)}", pool="m1", nearest_misses=near)
    if len(m2) < policy.min_m2:
        near = list(reversed(excluded))[:3]
        raise InsufficientPoolError(
            f"M2 has {len(m2)} surrogate(s) with similarity <= {policy.r2}, need {policy.min_m2}; "
            f"nearest misses: {_fmt(near)}", pool="m2", nearest_misses=near)
    if len(m1) + len(m2) < policy.min_total:
        raise InsufficientPoolError(
            f"|M1| + |M2| = {len(m1) + len(m2)} below the required total {policy.min_total}; "
            f"excluded middle band: {_fmt(excluded)}", pool="total", nearest_misses=excluded)
    return SurrogatePools(target, policy, m1, m2, excluded)


def _fmt(items):
    return ", ".join(f"{s}={v:.4f}" for s, v in items) or "none"


def recommend_n(pools: SurrogatePools, policy: ThresholdPolicy | None = None) -> Advisory:
    policy = policy or pools.policy
    total = pools.n
    if total < policy.recommended_total:
        return Advisory(True, total, policy.recommended_total,
                        f"only {total} surrogates tested; {policy.recommended_total} or more recommended")
    return Advisory(False, total, policy.recommended_total, "")


def pools_to_csv(pools: SurrogatePools, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "surrogate", "score", "pool"])
    for name in ("m1", "m2", "excluded"):
        for sid, score in getattr(pools, name):
            w.writerow([pools.target_id, sid, repr(float(score)), name])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def pools_from_csv(path, policy: ThresholdPolicy) -> SurrogatePools:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty pools file")
    groups = {"m1": [], "m2": [], "excluded": []}
    for r in rows:
        groups[r["pool"]].append((r["surrogate"], float(r["score"])))
    return SurrogatePools(rows[0]["target"], policy, _ordered(groups["m1"]), _ordered(groups["m2"]),
                          _ordered(groups["excluded"]))


def pools_report(pools: SurrogatePools) -> str:
    p = pools.policy
    lines = [
        f"Surrogate pools for target {pools.target_id}",
        f"  method: {p.method}   r1 = {p.r1:g}   r2 = {p.r2:g}",
        f"  M1 (similarity >= r1): {len(pools.m1)}",
    ]
    lines += [f"    {sid:<24} {score:.6f}" for sid, score in pools.m1]
    lines.append(f"  M2 (similarity <= r2): {len(pools.m2)}")
    lines += [f"    {sid:<24} {score:.6f}" for sid, score in pools.m2]
    lines.append(f"  excluded (r2 < similarity < r1): {len(pools.excluded)}")
    lines += [f"    {sid:<24} {score:.6f}" for sid, score in pools.excluded]
    adv = recommend_n(pools)
    lines.append(f"  surrogates tested: {pools.n}" + (f"  [advisory: {adv.message}]" if adv.below_recommended else ""))
    return "\n".join(lines) + "\n"
