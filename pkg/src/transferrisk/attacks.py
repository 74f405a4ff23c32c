"""Untargeted L-infinity evasion attacks (FGSM, PGD) crafted on a surrogate model.

Inputs live in [0, 1] and epsilon is measured in the same units. Every batch
is checked against its epsilon ball and the input range before it is
returned; a violation raises rather than being clipped silently.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .activations import ActivationMatrix, load_amat, save_amat
from .errors import ConfigError, DegenerateInputError, NumericalError, ShapeError
from .matcore import rng_stream
from .zoo import TrainedModel, input_gradient

LINF_SLACK = 1e-6


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.1
    alpha: float | None = None
    steps: int = 1
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind == "pgd":
            if self.alpha is None or not self.alpha > 0:
                raise ConfigError("pgd needs a positive step size alpha")
            if self.steps < 1:
                raise ConfigError("pgd needs steps >= 1")
            if self.alpha > self.epsilon:
                warnings.warn(f"pgd step size {self.alpha} exceeds epsilon {self.epsilon}", stacklevel=3)

    @property
    def label(self):
        if self.kind == "fgsm":
            return f"fgsm-eps{self.epsilon:g}"
        rs = "-rs" if self.random_start else ""
        return f"pgd-eps{self.epsilon:g}-a{self.alpha:g}-s{self.steps}{rs}"

    @classmethod
    def parse(cls, text, seed=0):
        """Parse ``fgsm:eps`` or ``pgd:eps:alpha:steps[:rs]``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "fgsm" and len(parts) == 2:
                return cls("fgsm", float(parts[1]), seed=seed)
            if parts[0] == "pgd" and len(parts) in (4, 5):
                if len(parts) == 5 and parts[4] != "rs":
                    raise ValueError(parts[4])
                return cls("pgd", float(parts[1]), float(parts[2]), int(parts[3]), len(parts) == 5, seed)
        except ValueError as exc:
            raise ConfigError(f"cannot parse attack spec {text!r}: {exc}") from exc
        raise ConfigError(f"cannot parse attack spec {text!r}; use fgsm:EPS or pgd:EPS:ALPHA:STEPS[:rs]")


@dataclass
class AdversarialBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    source_id: str
    config: AttackConfig

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SuccessRate:
    restricted: float
    unrestricted: float
    n: int
    n_correct: int


def check_constraints(originals, adversarials, epsilon):
    """Raise unless every example is inside the epsilon ball and [0, 1]."""
    if originals.shape != adversarials.shape:
        raise ShapeError("originals and adversarials differ in shape")
    if adversarials.size == 0:
        return
    dev = np.abs(adversarials - originals).reshape(len(originals), -1).max(axis=1)
    if np.any(dev > epsilon + LINF_SLACK):
        raise NumericalError(f"adversarial exceeds epsilon ball: max deviation {dev.max()} > {epsilon}")
    if adversarials.min() < 0 or adversarials.max() > 1:
        raise NumericalError("adversarial leaves the [0, 1] input domain")


def _prepare(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y):
        raise ShapeError("inputs and labels differ in length")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ConfigError("attack inputs must lie in [0, 1]")
    return x, y


def fgsm(model: TrainedModel, x, y, config: AttackConfig) -> AdversarialBatch:
    """adv = clip(x + eps * sign(grad), 0, 1)."""
    x, y = _prepare(x, y)
    adv = np.clip(x + config.epsilon * np.sign(input_gradient(model, x, y)), 0.0, 1.0)
    check_constraints(x, adv, config.epsilon)
    return AdversarialBatch(x, adv, y, model.model_id, config)


def pgd(model: TrainedModel, x, y, config: AttackConfig) -> AdversarialBatch:
    """Iterated sign-gradient ascent, projected onto the epsilon ball and [0, 1] after each step."""
    if config.kind != "pgd":
        raise ConfigError("pgd called with a non-pgd config")
    x, y = _prepare(x, y)
    eps = config.epsilon
    lo, hi = x - eps, x + eps
    adv = x.copy()
    if config.random_start:
        adv = np.clip(x + rng_stream(config.seed).uniform(-eps, eps, size=x.shape), 0.0, 1.0)
    for _ in range(config.steps):
        adv = adv + config.alpha * np.sign(input_gradient(model, adv, y))
        adv = np.clip(np.clip(adv, lo, hi), 0.0, 1.0)
        check_constraints(x, adv, eps)
    return AdversarialBatch(x, adv, y, model.model_id, config)


def run_attack(model, x, y, config: AttackConfig) -> AdversarialBatch:
    return fgsm(model, x, y, config) if config.kind == "fgsm" else pgd(model, x, y, config)


def attack_success(model: TrainedModel, batch: AdversarialBatch, allow_undefined=False) -> SuccessRate:
    """Fraction of adversarials misclassified by ``model``.

    ``restricted`` only counts examples the model got right on the originals;
    ``unrestricted`` counts every example. With no correct originals the
    restricted rate is undefined: an error by default, NaN if allowed.
    """
    if len(batch) == 0:
        raise DegenerateInputError("empty adversarial batch")
    correct = model.predict(batch.originals) == batch.labels
    fooled = model.predict(batch.adversarials) != batch.labels
    n_correct = int(correct.sum())
    if n_correct == 0 and not allow_undefined:
        raise DegenerateInputError(f"{model.model_id} classifies no original correctly; "
                                   "restricted success rate undefined")
    restricted = float(fooled[correct].mean()) if n_correct else float("nan")
    return SuccessRate(restricted, float(fooled.mean()), len(batch), n_correct)


def export_batch(batch: AdversarialBatch, directory, model: TrainedModel | None = None) -> dict:
    """Write originals/adversarials as AMAT files plus a CSV label manifest.

    When ``model`` is given the manifest also lists its predictions on both.
    Returns the written paths.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    probe_id = f"{batch.source_id}:{batch.config.label}"
    n = len(batch)
    paths = {"originals": directory / "originals.amat", "adversarials": directory / "adversarials.amat",
             "manifest": directory / "manifest.csv"}
    save_amat(ActivationMatrix(batch.source_id, 0, probe_id, batch.originals.reshape(n, -1)), paths["originals"])
    save_amat(ActivationMatrix(batch.source_id, 0, probe_id, batch.adversarials.reshape(n, -1)),
              paths["adversarials"])
    with open(paths["manifest"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if model is None:
            w.writerow(["index", "label"])
            w.writerows([i, int(l)] for i, l in enumerate(batch.labels))
        else:
            po, pa = model.predict(batch.originals), model.predict(batch.adversarials)
            w.writerow(["index", "label", "pred_original", "pred_adversarial"])
            w.writerows([i, int(l), int(a), int(b)] for i, (l, a, b) in enumerate(zip(batch.labels, po, pa)))
    return paths


def import_batch(directory, config: AttackConfig) -> AdversarialBatch:
    directory = Path(directory)
    orig = load_amat(directory / "originals.amat")
    adv = load_amat(directory / "adversarials.amat")
    with open(directory / "manifest.csv", newline="") as fh:
        labels = np.array([int(r["label"]) for r in csv.DictReader(fh)], dtype=np.int64)
    if len(labels) != orig.n or orig.data.shape != adv.data.shape:
        raise ShapeError(f"{directory}: manifest and AMAT payloads disagree")
    return AdversarialBatch(orig.data, adv.data, labels, orig.model_id, config)
