"""HSIC and centered kernel alignment between activation matrices.

CKA(X, Y) = HSIC(Kx, Ky) / sqrt(HSIC(Kx, Kx) * HSIC(Ky, Ky)) where Kx, Ky are
Gram matrices over the same probe inputs. Scores land in [0, 1].

Whole-model similarity is an aggregate over the layer-pair CKA grid. The
default ``mean_diag_band`` aggregate averages grid cells whose relative depths
are close (``|i/La - j/Lb| <= width``). It approximates, but is not, the
Diagonal Box Similarity score from the literature, whose exact definition is
not reproduced here.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationMatrix
from .errors import ConfigError, DegenerateInputError, NumericalError, ShapeError

METHODS = ("cka_linear", "cka_rbf", "diag_band")
AGGREGATE_MODES = ("mean_diag_band", "mean_all", "final_layer")
DEFAULT_BAND_WIDTH = 0.25
# pre-clamp slack; larger excursions are treated as internal errors
SCORE_SLACK = 1e-6
BAND_EPS = 1e-12
CSV_FIELDS = ("model_a", "model_b", "method", "layer_a", "layer_b", "score", "n", "probe_set")


@dataclass(frozen=True)
class SimilarityRecord:
    model_a: str
    model_b: str
    method: str
    layer_a: int | str
    layer_b: int | str
    score: float
    n: int
    probe_set: str
    raw_score: float | None = field(default=None, compare=False)
    clamped: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.model_a or not self.model_b:
            raise ConfigError("similarity record needs non-empty model ids")
        if self.method not in METHODS:
            raise ConfigError(f"unknown similarity method {self.method!r}")
        if not -1e-9 <= self.score <= 1 + 1e-9:
            raise ConfigError(f"similarity score {self.score} outside [0, 1]")
        if self.n < 2:
            raise ConfigError("similarity needs n >= 2")

    def other(self, model_id):
        return self.model_b if model_id == self.model_a else self.model_a


def _data(x):
    return x.data if isinstance(x, ActivationMatrix) else np.asarray(x, dtype=np.float64)


def _sq_distances(x):
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_bandwidth(x) -> float:
    """Median pairwise Euclidean distance over distinct pairs."""
    x = _data(x)
    d = np.sqrt(_sq_distances(x)[np.triu_indices(x.shape[0], 1)])
    sigma = float(np.median(d))
    if sigma <= 0:
        raise DegenerateInputError("median pairwise distance is zero; rbf bandwidth undefined")
    return sigma


def gram(x, kernel="linear", bandwidth="median") -> np.ndarray:
    """n x n Gram matrix: ``X X^T`` or ``exp(-||xi - xj||^2 / (2 sigma^2))``."""
    x = _data(x)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError("gram needs an n x d matrix with n >= 2")
    if kernel == "linear":
        return x @ x.T
    if kernel != "rbf":
        raise ConfigError(f"unknown kernel {kernel!r}")
    if bandwidth == "median":
        sigma = median_bandwidth(x)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise ConfigError(f"rbf bandwidth must be positive, got {bandwidth}")
    return np.exp(-_sq_distances(x) / (2.0 * sigma * sigma))


def _double_center(k):
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def _check_pair(k, l, min_n):
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    for m in (k, l):
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"kernel matrix must be square, got {m.shape}")
        if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ShapeError("kernel matrix must be symmetric")
    if k.shape != l.shape:
        raise ShapeError(f"kernel sizes differ: {k.shape} vs {l.shape}")
    if k.shape[0] < min_n:
        raise DegenerateInputError(f"estimator needs n >= {min_n}, got {k.shape[0]}")
    return k, l


def _unbiased_terms(k, l):
    n = k.shape[0]
    kt = k - np.diag(np.diag(k))
    lt = l - np.diag(np.diag(l))
    ks, ls = kt.sum(axis=1), lt.sum(axis=1)
    return (np.sum(kt * lt) + ks.sum() * ls.sum() / ((n - 1) * (n - 2))
            - 2.0 / (n - 2) * np.dot(ks, ls)) / (n * (n - 3))


def hsic(k, l, estimator="biased") -> float:
    """HSIC of two kernel matrices.

    biased:   tr(K H L H) / (n - 1)^2
    unbiased: the U-statistic of Song et al. (2012); needs n >= 4.
    """
    if estimator == "biased":
        k, l = _check_pair(k, l, 2)
        n = k.shape[0]
        return float(np.sum(_double_center(k) * _double_center(l)) / (n - 1) ** 2)
    if estimator == "unbiased":
        k, l = _check_pair(k, l, 4)
        return float(_unbiased_terms(k, l))
    raise ConfigError(f"unknown HSIC estimator {estimator!r}")


def _self_floor(k):
    n = k.shape[0]
    return 1e-12 * float(np.sum(k * k)) / (n - 1) ** 2 + 1e-300


def _normalize(hxy, hxx, hyy, estimator):
    raw = hxy / math.sqrt(hxx * hyy)
    if raw > 1 + SCORE_SLACK or (estimator == "biased" and raw < -SCORE_SLACK):
        raise NumericalError(f"CKA pre-clamp value {raw!r} outside [0, 1] beyond slack")
    return min(max(raw, 0.0), 1.0), raw, raw < -SCORE_SLACK


def _method(kernel):
    return "cka_linear" if kernel == "linear" else "cka_rbf"


def cka(x: ActivationMatrix, y: ActivationMatrix, kernel="linear", estimator="biased",
        bandwidth="median") -> SimilarityRecord:
    if x.probe_set_id != y.probe_set_id:
        raise ConfigError(f"probe sets differ: {x.probe_set_id!r} vs {y.probe_set_id!r}")
    if x.n != y.n:
        raise ShapeError(f"probe counts differ: {x.n} vs {y.n}")
    kx = gram(x, kernel, bandwidth)
    ky = gram(y, kernel, bandwidth)
    hxx = hsic(kx, kx, estimator)
    hyy = hsic(ky, ky, estimator)
    for h, k, m in ((hxx, kx, x), (hyy, ky, y)):
        if h <= _self_floor(k):
            raise DegenerateInputError(
                f"{m.model_id} layer {m.layer_index}: activations are constant over the probe set")
    score, raw, flagged = _normalize(hsic(kx, ky, estimator), hxx, hyy, estimator)
    return SimilarityRecord(x.model_id, y.model_id, _method(kernel), x.layer_index, y.layer_index,
                            score, x.n, x.probe_set_id, raw, flagged)


def minibatch_cka(x_batches, y_batches, kernel="linear", bandwidth="median") -> SimilarityRecord:
    """Unbiased HSIC accumulated over matching batches of one probe set, then normalised."""
    if len(x_batches) != len(y_batches) or not x_batches:
        raise ConfigError("x and y must be split into the same non-zero number of batches")
    hxy, hxx, hyy = [], [], []
    for bx, by in zip(x_batches, y_batches):
        if bx.n != by.n or bx.probe_set_id != by.probe_set_id:
            raise ConfigError("batch partitions of x and y do not match")
        if bx.n < 4:
            raise DegenerateInputError("each batch needs at least 4 probes")
        kx, ky = gram(bx, kernel, bandwidth), gram(by, kernel, bandwidth)
        hxy.append(hsic(kx, ky, "unbiased"))
        hxx.append(hsic(kx, kx, "unbiased"))
        hyy.append(hsic(ky, ky, "unbiased"))
    sxx, syy = math.fsum(hxx), math.fsum(hyy)
    if sxx <= 0 or syy <= 0:
        raise DegenerateInputError("accumulated self-HSIC is not positive; activations degenerate")
    score, raw, flagged = _normalize(math.fsum(hxy), sxx, syy, "unbiased")
    first_x, first_y = x_batches[0], y_batches[0]
    return SimilarityRecord(first_x.model_id, first_y.model_id, _method(kernel), first_x.layer_index,
                            first_y.layer_index, score, sum(b.n for b in x_batches),
                            first_x.probe_set_id, raw, flagged)


@dataclass
class LayerSimilarityMatrix:
    model_a: str
    model_b: str
    grid: np.ndarray  # NaN marks layer pairs that were degenerate
    method: str
    layers_a: tuple
    layers_b: tuple
    probe_set: str
    n: int


def layer_matrix(acts_a, acts_b, kernel="linear", estimator="biased") -> LayerSimilarityMatrix:
    if not acts_a or not acts_b:
        raise ConfigError("layer_matrix needs at least one activation matrix per model")
    probes = {m.probe_set_id for m in list(acts_a) + list(acts_b)}
    if len(probes) != 1:
        raise ConfigError(f"activation matrices span several probe sets: {sorted(probes)}")
    grams_a = [gram(a, kernel) for a in acts_a]
    grams_b = [gram(b, kernel) for b in acts_b]
    self_a = [hsic(k, k, estimator) for k in grams_a]
    self_b = [hsic(k, k, estimator) for k in grams_b]
    grid = np.full((len(acts_a), len(acts_b)), np.nan)
    for i, (ka, ha) in enumerate(zip(grams_a, self_a)):
        if ha <= _self_floor(ka):
            continue
        for j, (kb, hb) in enumerate(zip(grams_b, self_b)):
            if hb <= _self_floor(kb):
                continue
            grid[i, j] = _normalize(hsic(ka, kb, estimator), ha, hb, estimator)[0]
    return LayerSimilarityMatrix(acts_a[0].model_id, acts_b[0].model_id, grid, _method(kernel),
                                 tuple(a.layer_index for a in acts_a), tuple(b.layer_index for b in acts_b),
                                 probes.pop(), acts_a[0].n)


def band_mask(shape, width) -> np.ndarray:
    la, lb = shape
    i = np.arange(la)[:, None] / la
    j = np.arange(lb)[None, :] / lb
    return np.abs(i - j) <= width + BAND_EPS


def aggregate_score(lm: LayerSimilarityMatrix, mode="mean_diag_band", width=DEFAULT_BAND_WIDTH) -> SimilarityRecord:
    grid = lm.grid
    if grid.size == 0:
        raise ConfigError("empty layer similarity grid")
    if mode == "final_layer":
        score = grid[-1, -1]
        if np.isnan(score):
            raise DegenerateInputError("final-layer pair is degenerate")
        return SimilarityRecord(lm.model_a, lm.model_b, lm.method, lm.layers_a[-1], lm.layers_b[-1],
                                float(score), lm.n, lm.probe_set)
    if mode == "mean_all":
        mask, method = np.ones(grid.shape, dtype=bool), lm.method
    elif mode == "mean_diag_band":
        if width < 0:
            raise ConfigError("band width must be >= 0")
        mask, method = band_mask(grid.shape, width), "diag_band"
    else:
        raise ConfigError(f"unknown aggregate mode {mode!r}")
    cells = grid[mask & ~np.isnan(grid)]
    if cells.size == 0:
        raise ConfigError(f"aggregate {mode} selects no usable grid entries")
    return SimilarityRecord(lm.model_a, lm.model_b, method, "aggregate", "aggregate",
                            float(np.mean(cells)), lm.n, lm.probe_set)


def model_similarity(acts_target, acts_surrogate, mode="mean_diag_band", width=DEFAULT_BAND_WIDTH,
                     kernel="linear") -> SimilarityRecord:
    """Whole-model similarity of a surrogate to the target (target is ``model_a``)."""
    return aggregate_score(layer_matrix(acts_target, acts_surrogate, kernel), mode, width)


# ---------------------------------------------------------------------------
# CSV


def _layer_field(value):
    return value if value == "aggregate" else int(value)


def write_records_csv(records, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([r.model_a, r.model_b, r.method, r.layer_a, r.layer_b, repr(float(r.score)), r.n, r.probe_set])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_records_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and set(rows[0]) != set(CSV_FIELDS):
        raise ConfigError(f"{path}: expected columns {CSV_FIELDS}")
    return [SimilarityRecord(r["model_a"], r["model_b"], r["method"], _layer_field(r["layer_a"]),
                             _layer_field(r["layer_b"]), float(r["score"]), int(r["n"]), r["probe_set"])
            for r in rows]
