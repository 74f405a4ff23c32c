"""Config-driven pipeline: zoo -> activations -> similarity -> pools -> attacks -> report.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Model entries take space separated ``name=value`` options::

    target         = hidden=64,64
    surrogate.s1   = hidden=32 subsample=0.5
    surrogate.c1   = conv=4:3 hidden=32 epochs=20

Every random seed is derived from the master seed with
:func:`transferrisk.matcore.derive_seed` as ``derive_seed(seed, stage, entity)``
so adding a surrogate never changes the randomness of another.

Each stage reads its inputs from and writes its outputs to the output
directory, and :func:`run_pipeline` is exactly the stages run in order.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import activations as acts
from . import attacks, riskeval, selection, similarity, zoo
from .errors import ConfigError, DependencyError, TransferRiskError
from .matcore import derive_seed, rng_stream

STAGES = ("train-zoo", "capture", "similarity", "select", "attack", "evaluate", "report")
TARGET_ID = "target"

DEFAULTS = {
    "dataset": "blobs",
    "dataset.n": "1600",
    "dataset.classes": "4",
    "dataset.dim": "10",
    "dataset.spread": "0.15",
    "probe.size": "200",
    "attack.size": "0",
    "attacks": "pgd:0.1:0.01:20",
    "similarity.kernel": "linear",
    "similarity.mode": "mean_diag_band",
    "similarity.width": "0.25",
    "policy.min_m1": "1",
    "policy.min_m2": "1",
    "policy.min_total": "3",
    "policy.recommended_total": "5",
    "regression.link": "logit",
    "bootstrap.trials": "1000",
    "train.epochs": "30",
    "train.learning_rate": "0.1",
    "train.batch_size": "32",
    "seed": "42",
    "out": "run",
    "target": "hidden=64,64",
}
MODEL_OPTIONS = ("hidden", "conv", "subsample", "epochs", "lr", "batch")


def example_config_path() -> Path:
    return Path(str(resources.files("transferrisk") / "data" / "example.cfg"))


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    hidden: tuple = (64,)
    conv: tuple = ()
    subsample: float = 1.0
    epochs: int | None = None
    lr: float | None = None
    batch: int | None = None

    @classmethod
    def parse(cls, model_id, text):
        opts = {}
        for token in text.split():
            if "=" not in token:
                raise ConfigError(f"model {model_id}: option {token!r} is not name=value")
            name, value = token.split("=", 1)
            if name not in MODEL_OPTIONS:
                raise ConfigError(f"model {model_id}: unknown option {name!r}; choose from {MODEL_OPTIONS}")
            opts[name] = value
        try:
            return cls(
                model_id,
                hidden=tuple(int(u) for u in opts["hidden"].split(",")) if opts.get("hidden") else (),
                conv=tuple(tuple(int(v) for v in c.split(":")) for c in opts["conv"].split(","))
                if opts.get("conv") else (),
                subsample=float(opts.get("subsample", 1.0)),
                epochs=int(opts["epochs"]) if "epochs" in opts else None,
                lr=float(opts["lr"]) if "lr" in opts else None,
                batch=int(opts["batch"]) if "batch" in opts else None,
            )
        except ValueError as exc:
            raise ConfigError(f"model {model_id}: {exc}") from exc

    def descriptor(self, input_dim, classes, init_seed):
        if self.conv:
            side = int(round(np.sqrt(input_dim)))
            if side * side != input_dim:
                raise ConfigError(f"model {self.model_id}: conv layers need square image inputs")
            return zoo.convnet(self.model_id, (1, side, side), classes, self.conv, self.hidden, init_seed)
        return zoo.mlp(self.model_id, input_dim, classes, self.hidden, init_seed)


@dataclass
class RunConfig:
    values: dict
    seed: int
    out: Path
    dataset_kind: str
    dataset_n: int
    classes: int
    dim: int
    spread: float
    probe_size: int
    attack_size: int
    kernel: str
    mode: str
    width: float
    policy: selection.ThresholdPolicy
    attacks: tuple
    link: str
    trials: int
    epochs: int
    learning_rate: float
    batch_size: int
    target: ModelSpec
    surrogates: tuple = field(default_factory=tuple)

    @property
    def method(self):
        return method_for(self.mode, self.kernel)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def stage_seed(self, stage, entity=""):
        return derive_seed(self.seed, stage, entity)

    def hyperparams(self, spec: ModelSpec):
        return zoo.Hyperparams(epochs=spec.epochs if spec.epochs is not None else self.epochs,
                               learning_rate=spec.lr if spec.lr is not None else self.learning_rate,
                               batch_size=spec.batch if spec.batch is not None else self.batch_size,
                               seed=self.stage_seed("train", spec.model_id), subsample=spec.subsample)

    def describe(self):
        """Sorted key/value view embedded in the report (output dir excluded)."""
        return {k: v for k, v in sorted(self.values.items()) if k != "out"}


def method_for(mode, kernel):
    if mode == "mean_diag_band":
        return "diag_band"
    return "cka_linear" if kernel == "linear" else "cka_rbf"


def build_config(values: dict, overrides: dict | None = None) -> RunConfig:
    """Validate a key/value mapping (plus CLI overrides) into a :class:`RunConfig`.

    Policy validation happens here so a bad threshold pair fails before any
    training starts.
    """
    v = {**DEFAULTS, **values}
    for k, val in (overrides or {}).items():
        if val is not None:
            v[k] = str(val)
    known = set(DEFAULTS) | {"policy.r1", "policy.r2", "eps", "attack.kind"}
    unknown = [k for k in v if k not in known and not k.startswith("surrogate.")]
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    def num(key, cast):
        try:
            return cast(v[key])
        except ValueError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc

    seed = num("seed", int)
    mode, kernel = v["similarity.mode"], v["similarity.kernel"]
    if mode not in similarity.AGGREGATE_MODES:
        raise ConfigError(f"similarity.mode must be one of {similarity.AGGREGATE_MODES}")
    if kernel not in ("linear", "rbf"):
        raise ConfigError("similarity.kernel must be linear or rbf")
    policy_kw = {k: num(f"policy.{k}", int) for k in ("min_m1", "min_m2", "min_total", "recommended_total")}
    for k in ("r1", "r2"):
        if f"policy.{k}" in v:
            policy_kw[k] = num(f"policy.{k}", float)
    policy = selection.ThresholdPolicy.for_method(method_for(mode, kernel), **policy_kw)

    attack_list = [attacks.AttackConfig.parse(t) for t in v["attacks"].split(",") if t.strip()]
    if "attack.kind" in v:
        kind = v["attack.kind"]
        attack_list = [a for a in attack_list if a.kind == kind] or [
            attacks.AttackConfig.parse(f"{kind}:0.1" if kind == "fgsm" else f"{kind}:0.1:0.01:20")]
    if "eps" in v:
        eps = num("eps", float)
        attack_list = [replace(a, epsilon=eps, alpha=a.alpha * eps / a.epsilon if a.alpha and a.epsilon else a.alpha)
                       if a.kind == "pgd" else replace(a, epsilon=eps) for a in attack_list]
    if not attack_list:
        raise ConfigError("no attacks configured")
    labels = [a.label for a in attack_list]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate attack configurations")

    surrogates = tuple(ModelSpec.parse(k.split(".", 1)[1], v[k]) for k in sorted(v) if k.startswith("surrogate."))
    if any(s.model_id == TARGET_ID for s in surrogates):
        raise ConfigError(f"surrogate id {TARGET_ID!r} is reserved for the target")
    if len(surrogates) < policy.min_total:
        raise ConfigError(f"{len(surrogates)} surrogates configured; the policy needs at least {policy.min_total}")
    link = v["regression.link"]
    if link not in riskeval.LINKS:
        raise ConfigError(f"regression.link must be one of {riskeval.LINKS}")
    return RunConfig(
        values=v, seed=seed, out=Path(v["out"]), dataset_kind=v["dataset"], dataset_n=num("dataset.n", int),
        classes=num("dataset.classes", int), dim=num("dataset.dim", int), spread=num("dataset.spread", float),
        probe_size=num("probe.size", int), attack_size=num("attack.size", int), kernel=kernel, mode=mode,
        width=num("similarity.width", float), policy=policy, attacks=tuple(attack_list), link=link,
        trials=num("bootstrap.trials", int), epochs=num("train.epochs", int),
        learning_rate=num("train.learning_rate", float), batch_size=num("train.batch_size", int),
        target=ModelSpec.parse(TARGET_ID, v["target"]), surrogates=surrogates,
    )


def load_config(path=None, **overrides) -> RunConfig:
    path = Path(path) if path else example_config_path()
    if not path.exists():
        raise DependencyError(f"config file not found: {path}", path=path)
    return build_config(parse_config_text(path.read_text()), overrides)


# ---------------------------------------------------------------------------
# helpers shared by stages


def _require(path: Path) -> Path:
    if not path.exists():
        raise DependencyError(f"missing prerequisite {path}; run the earlier stage first", path=path)
    return path


def dataset(cfg: RunConfig) -> zoo.Dataset:
    return zoo.generate_dataset(cfg.dataset_kind, cfg.dataset_n, cfg.classes, cfg.stage_seed("dataset"),
                                dim=cfg.dim, spread=cfg.spread)


def probe_set(cfg: RunConfig, data: zoo.Dataset) -> acts.ProbeSet:
    seed = cfg.stage_seed("probe")
    return acts.make_probe_set(data, cfg.probe_size, seed, f"probe-{seed:016x}")


def attack_set(cfg: RunConfig, data: zoo.Dataset):
    x, y = data.test()
    order = rng_stream(cfg.stage_seed("attack-set")).permutation(len(y))
    if cfg.attack_size:
        order = order[:cfg.attack_size]
    return x[order], y[order]


def model_ids(cfg: RunConfig):
    return [TARGET_ID] + [s.model_id for s in cfg.surrogates]


def model_path(cfg, model_id):
    return cfg.path("models", f"{model_id}.trmz")


def load_model(cfg, model_id):
    return zoo.load_model(_require(model_path(cfg, model_id)))


def load_activations(cfg, model_id):
    directory = _require(cfg.path("activations", model_id))
    mats = [acts.load_amat(p) for p in directory.glob("layer*.amat")]
    if not mats:
        raise DependencyError(f"no AMAT files under {directory}", path=directory)
    return sorted(mats, key=lambda m: m.layer_index)


def _attack_seeded(cfg, config: attacks.AttackConfig, surrogate_id):
    return replace(config, seed=cfg.stage_seed("attack", f"{surrogate_id}/{config.label}"))


def _load_pools(cfg):
    return selection.pools_from_csv(_require(cfg.path("pools.csv")), cfg.policy)


def build_zoo(cfg: RunConfig, data: zoo.Dataset | None = None) -> dict:
    """Train the target and every surrogate in memory; returns ``{id: model}``."""
    data = data if data is not None else dataset(cfg)
    input_dim = data.inputs.shape[1]
    models = {}
    for spec in (cfg.target,) + cfg.surrogates:
        desc = spec.descriptor(input_dim, cfg.classes, cfg.stage_seed("init", spec.model_id))
        models[spec.model_id] = zoo.train(desc, data, cfg.hyperparams(spec))
    return models


# ---------------------------------------------------------------------------
# stages


def stage_train_zoo(cfg: RunConfig):
    cfg.path("models").mkdir(parents=True, exist_ok=True)
    for model_id, model in build_zoo(cfg).items():
        zoo.save_model(model, model_path(cfg, model_id))


def stage_capture(cfg: RunConfig):
    probes = probe_set(cfg, dataset(cfg))
    for model_id in model_ids(cfg):
        model = load_model(cfg, model_id)
        directory = cfg.path("activations", model_id)
        if directory.exists():
            shutil.rmtree(directory)
        directory.mkdir(parents=True)
        for m in acts.capture(model, probes):
            acts.save_amat(m, directory / f"layer{m.layer_index:03d}.amat")


def stage_similarity(cfg: RunConfig):
    target_acts = load_activations(cfg, TARGET_ID)
    aggregate, cells = [], []
    for spec in cfg.surrogates:
        lm = similarity.layer_matrix(target_acts, load_activations(cfg, spec.model_id), cfg.kernel)
        aggregate.append(similarity.aggregate_score(lm, cfg.mode, cfg.width))
        for i, la in enumerate(lm.layers_a):
            for j, lb in enumerate(lm.layers_b):
                if not np.isnan(lm.grid[i, j]):
                    cells.append(similarity.SimilarityRecord(lm.model_a, lm.model_b, lm.method, la, lb,
                                                             float(lm.grid[i, j]), lm.n, lm.probe_set))
    similarity.write_records_csv(aggregate, cfg.path("similarity.csv"))
    similarity.write_records_csv(cells, cfg.path("layers.csv"))


def stage_select(cfg: RunConfig):
    records = similarity.read_records_csv(_require(cfg.path("similarity.csv")))
    pools = selection.select_pools(records, cfg.policy, TARGET_ID)
    selection.pools_to_csv(pools, cfg.path("pools.csv"))
    cfg.path("pools.txt").write_text(selection.pools_report(pools))
    return pools


def stage_attack(cfg: RunConfig):
    pools = _load_pools(cfg)
    x, y = attack_set(cfg, dataset(cfg))
    for sid in pools.members():
        surrogate = load_model(cfg, sid)
        for config in cfg.attacks:
            batch = attacks.run_attack(surrogate, x, y, _attack_seeded(cfg, config, sid))
            attacks.export_batch(batch, cfg.path("attacks", sid, config.label), surrogate)


def stage_evaluate(cfg: RunConfig):
    pools = _load_pools(cfg)
    target = load_model(cfg, TARGET_ID)
    score = dict(pools.m1 + pools.m2)
    records = []
    for sid in pools.members():
        surrogate = load_model(cfg, sid)
        for config in cfg.attacks:
            directory = _require(cfg.path("attacks", sid, config.label))
            batch = attacks.import_batch(directory, config)
            attacks.check_constraints(batch.originals, batch.adversarials, config.epsilon)
            records.append(riskeval.evaluate_transfer(surrogate, target, batch, score[sid],
                                                      pools.pool_of(sid)))
    riskeval.records_to_csv(records, cfg.path("transfer.csv"))
    return records


def _zoo_summary(cfg):
    out = []
    for model_id in model_ids(cfg):
        m = load_model(cfg, model_id)
        out.append({"id": model_id, "layers": [l.to_dict() for l in m.descriptor.layers],
                    "test_accuracy": m.metadata.get("test_accuracy"),
                    "subsample": m.metadata.get("subsample"), "epochs": m.metadata.get("epochs")})
    return out


def stage_report(cfg: RunConfig, timestamp=None):
    pools = _load_pools(cfg)
    records = riskeval.records_from_csv(_require(cfg.path("transfer.csv")))
    meta = {
        "master_seed": cfg.seed,
        "seed_rule": "sha256('<master>/<stage>/<entity>')[:8] little-endian",
        "similarity": {"method": cfg.method, "mode": cfg.mode, "kernel": cfg.kernel, "band_width": cfg.width,
                       "note": "mean_diag_band approximates, and is not, Diagonal Box Similarity"},
        "adversarial_examples": int(sum(r.n for r in records)),
        "config": cfg.describe(),
        "zoo": _zoo_summary(cfg),
    }
    report = riskeval.build_report(pools, records, attacks=[a.label for a in cfg.attacks], link=cfg.link,
                                   trials=cfg.trials, seed=cfg.stage_seed("bootstrap"), metadata=meta)
    stamp = timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
    cfg.path("report.json").write_text(report.to_json(stamp))
    riskeval.records_to_csv(report.records, cfg.path("records.csv"))
    riskeval.curve_to_csv(report, cfg.path("curve.csv"))
    return report


STAGE_FUNCS = {
    "train-zoo": stage_train_zoo,
    "capture": stage_capture,
    "similarity": stage_similarity,
    "select": stage_select,
    "attack": stage_attack,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


class StageFailure(Exception):
    """Wraps a toolkit error with the name of the stage that raised it."""

    def __init__(self, stage, error):
        super().__init__(f"stage {stage}: {error}")
        self.stage = stage
        self.error = error


def run_stage(cfg: RunConfig, stage: str, **kwargs):
    try:
        return STAGE_FUNCS[stage](cfg, **kwargs)
    except TransferRiskError as exc:
        raise StageFailure(stage, exc) from exc


def run_pipeline(cfg: RunConfig, timestamp=None) -> riskeval.RiskReport:
    cfg.out.mkdir(parents=True, exist_ok=True)
    for stage in STAGES[:-1]:
        run_stage(cfg, stage)
    return run_stage(cfg, "report", timestamp=timestamp)


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
