"""Desk-scale model population: procedural datasets, small networks, SGD training.

Networks are stacks of ``dense``, ``conv2d`` (valid padding, stride 1), ``relu``
and ``flatten`` layers ending in a dense logit layer. Forward and backward
passes are written directly in numpy so input gradients are exact and cheap.

Model files use the TRMZ container::

    b"TRMZ" | u8 version (=1) | u32 len + UTF-8 JSON {descriptor, metadata}
    | u32 tensor count | per tensor: u8 ndim, ndim x u32 dims, float32 LE payload

Tensors are written weight-then-bias for each parametric layer in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _binio
from .errors import ConfigError, DegenerateInputError, FormatError, ShapeError, TrainingError
from .matcore import rng_stream

LAYER_KINDS = ("dense", "conv2d", "relu", "flatten")
DATASET_KINDS = ("blobs", "moons", "digits8x8")
TRMZ_MAGIC = b"TRMZ"
TRMZ_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    units: int | None = None
    filters: int | None = None
    kernel: int | None = None

    def to_dict(self):
        return {k: v for k, v in (("kind", self.kind), ("units", self.units),
                                  ("filters", self.filters), ("kernel", self.kernel)) if v is not None}


def _output_shape(spec: LayerSpec, shape: tuple) -> tuple:
    if spec.kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense layer expects a flat input, got shape {shape}")
        if not spec.units or spec.units < 1:
            raise ConfigError("dense layer needs units >= 1")
        return (spec.units,)
    if spec.kind == "conv2d":
        if len(shape) != 3:
            raise ShapeError(f"conv2d expects (channels, height, width), got {shape}")
        if not spec.filters or not spec.kernel or spec.filters < 1 or spec.kernel < 1:
            raise ConfigError("conv2d layer needs filters >= 1 and kernel >= 1")
        c, h, w = shape
        if spec.kernel > h or spec.kernel > w:
            raise ShapeError(f"kernel {spec.kernel} larger than input {h}x{w}")
        return (spec.filters, h - spec.kernel + 1, w - spec.kernel + 1)
    if spec.kind == "relu":
        return shape
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    raise ConfigError(f"unsupported layer kind {spec.kind!r}")


@dataclass(frozen=True)
class NetworkDescriptor:
    model_id: str
    layers: tuple
    input_shape: tuple
    classes: int
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if not self.model_id:
            raise ConfigError("model id must be non-empty")
        if self.classes < 2:
            raise ConfigError("class count must be >= 2")
        if not any(l.kind == "relu" for l in self.layers):
            raise ConfigError(f"{self.model_id}: network needs at least one nonlinear layer")
        shapes = self.layer_shapes()
        if self.layers[-1].kind != "dense" or shapes[-1] != (self.classes,):
            raise ConfigError(f"{self.model_id}: final layer must be dense with {self.classes} units")

    def layer_shapes(self):
        shapes, shape = [], self.input_shape
        for spec in self.layers:
            shape = _output_shape(spec, shape)
            shapes.append(shape)
        return shapes

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))

    def capturable_layers(self):
        """Indices of post-nonlinearity outputs plus the final logit layer."""
        last = len(self.layers) - 1
        return [i for i, l in enumerate(self.layers) if l.kind == "relu" and i != last] + [last]

    def to_dict(self):
        return {"model_id": self.model_id, "layers": [l.to_dict() for l in self.layers],
                "input_shape": list(self.input_shape), "classes": self.classes,
                "init_seed": self.init_seed}

    @classmethod
    def from_dict(cls, d):
        return cls(d["model_id"], tuple(LayerSpec(**l) for l in d["layers"]),
                   tuple(d["input_shape"]), int(d["classes"]), int(d["init_seed"]))


def mlp(model_id, input_dim, classes, hidden=(32,), init_seed=0) -> NetworkDescriptor:
    layers = []
    for units in hidden:
        layers += [LayerSpec("dense", units=int(units)), LayerSpec("relu")]
    layers.append(LayerSpec("dense", units=classes))
    return NetworkDescriptor(model_id, tuple(layers), (input_dim,), classes, init_seed)


def convnet(model_id, input_shape, classes, conv=((4, 3),), hidden=(32,), init_seed=0) -> NetworkDescriptor:
    """``conv`` is a sequence of (filters, kernel) pairs applied before flattening."""
    layers = []
    for filters, kernel in conv:
        layers += [LayerSpec("conv2d", filters=int(filters), kernel=int(kernel)), LayerSpec("relu")]
    layers.append(LayerSpec("flatten"))
    for units in hidden:
        layers += [LayerSpec("dense", units=int(units)), LayerSpec("relu")]
    layers.append(LayerSpec("dense", units=classes))
    return NetworkDescriptor(model_id, tuple(layers), tuple(input_shape), classes, init_seed)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    classes: int
    kind: str = "custom"
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        n = len(self.labels)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != n or self.is_test.shape != (n,):
            raise ShapeError("inputs, labels and split tags must agree in length")
        if np.any(self.inputs < 0) or np.any(self.inputs > 1) or not np.all(np.isfinite(self.inputs)):
            raise ConfigError("dataset inputs must lie in [0, 1]")
        if np.any(self.labels < 0) or np.any(self.labels >= self.classes):
            raise ConfigError("labels out of range")
        if self.is_test.all() or not self.is_test.any():
            raise DegenerateInputError("dataset needs at least one train and one test example")
        missing = set(range(self.classes)) - set(self.labels[~self.is_test].tolist())
        if missing:
            raise DegenerateInputError(f"classes {sorted(missing)} absent from the train split")

    def train(self):
        return self.inputs[~self.is_test], self.labels[~self.is_test]

    def test(self):
        return self.inputs[self.is_test], self.labels[self.is_test]


_DIGIT_GLYPHS = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..", "........"],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..", "........"],
    ["..####..", ".#....#.", "......#.", "....##..", "..##....", ".#......", ".######.", "........"],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..", "........"],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", "........"],
    [".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..", "........"],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "........"],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..", "........"],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..", "........"],
]
DIGIT_TEMPLATES = np.array([[[c == "#" for c in row] for row in g] for g in _DIGIT_GLYPHS], dtype=np.float64)


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        img[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def generate_dataset(kind, n, classes, seed, *, dim=2, spread=0.06, test_fraction=0.25) -> Dataset:
    """Procedurally generate a balanced classification dataset with inputs in [0, 1].

    ``dim`` and ``spread`` only affect ``blobs``. Inputs are rounded onto the
    float32 grid so storing them in 32-bit files is lossless.
    """
    if kind not in DATASET_KINDS:
        raise ConfigError(f"unsupported dataset kind {kind!r}; choose from {DATASET_KINDS}")
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if n < 10 * classes:
        raise ConfigError(f"need n >= 10 * classes ({10 * classes}), got {n}")
    if kind == "moons" and classes != 2:
        raise ConfigError("moons supports exactly 2 classes")
    if kind == "digits8x8" and classes > 10:
        raise ConfigError("digits8x8 supports at most 10 classes")

    rng = rng_stream(seed)
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    labels = np.repeat(np.arange(classes), counts)

    if kind == "blobs":
        # rejection-sample well separated centres so classes stay separable
        for _ in range(1000):
            centers = rng.uniform(0.2, 0.8, size=(classes, dim))
            gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
            if np.all(gaps[np.triu_indices(classes, 1)] >= 0.3):
                break
        x = centers[labels] + spread * rng.standard_normal((n, dim))
    elif kind == "moons":
        t = rng.uniform(0.0, np.pi, size=n)
        x = np.where(labels[:, None] == 0,
                     np.stack([np.cos(t), np.sin(t)], axis=1),
                     np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1))
        x = x + 0.1 * rng.standard_normal((n, 2))
        x = (x - np.array([-1.25, -0.75])) / np.array([3.5, 2.5])
    else:
        x = np.empty((n, 64))
        for i, lab in enumerate(labels):
            dy, dx = rng.integers(-1, 2, size=2)
            img = _shift(DIGIT_TEMPLATES[lab], int(dy), int(dx)) * rng.uniform(0.7, 1.0)
            x[i] = (img + 0.1 * rng.standard_normal((8, 8))).ravel()
    x = np.clip(x, 0.0, 1.0).astype(np.float32).astype(np.float64)

    is_test = np.zeros(n, dtype=bool)
    start = 0
    for c in range(classes):
        n_test = min(max(1, int(round(counts[c] * test_fraction))), counts[c] - 1)
        picks = rng.permutation(counts[c])[:n_test]
        is_test[start + picks] = True
        start += counts[c]

    order = rng.permutation(n)
    return Dataset(x[order], labels[order], is_test[order], classes, kind, seed)


# ---------------------------------------------------------------------------
# models


@dataclass
class TrainedModel:
    descriptor: NetworkDescriptor
    params: list
    metadata: dict = field(default_factory=dict)

    @property
    def model_id(self):
        return self.descriptor.model_id

    def predict(self, x):
        logits, _ = forward(self, x, capture=False)
        return np.argmax(logits, axis=1)

    def accuracy(self, x, y):
        return float(np.mean(self.predict(x) == np.asarray(y)))


def init_params(descriptor: NetworkDescriptor) -> list:
    """He-normal weights and zero biases drawn from the descriptor's init seed."""
    rng = rng_stream(descriptor.init_seed)
    params, shape = [], descriptor.input_shape
    for spec in descriptor.layers:
        if spec.kind == "dense":
            fan_in = shape[0]
            w = rng.standard_normal((fan_in, spec.units)) * np.sqrt(2.0 / fan_in)
            params.append((w, np.zeros(spec.units)))
        elif spec.kind == "conv2d":
            fan_in = shape[0] * spec.kernel ** 2
            w = rng.standard_normal((spec.filters, shape[0], spec.kernel, spec.kernel)) * np.sqrt(2.0 / fan_in)
            params.append((w, np.zeros(spec.filters)))
        shape = _output_shape(spec, shape)
    return params


def untrained(descriptor: NetworkDescriptor) -> TrainedModel:
    return TrainedModel(descriptor, init_params(descriptor), {"epochs": 0})


def _as_batch(descriptor, x):
    x = np.asarray(x, dtype=np.float64)
    shape = descriptor.input_shape
    if x.shape[1:] == shape:
        return x
    if x.ndim == 2 and x.shape[1] == descriptor.input_size:
        return x.reshape((x.shape[0],) + shape)
    if x.ndim == len(shape) and x.shape == shape:
        return x[None]
    raise ShapeError(f"{descriptor.model_id}: input shape {x.shape} does not match {shape}")


def _im2col(x, k):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k), ho, wo


def _run(model, x):
    """Forward pass returning logits and the per-layer cache needed for backward."""
    desc = model.descriptor
    cache, outputs = [], []
    pi = 0
    for spec in desc.layers:
        if spec.kind == "dense":
            w, b = model.params[pi]
            pi += 1
            cache.append(x)
            x = x @ w + b
        elif spec.kind == "conv2d":
            w, b = model.params[pi]
            pi += 1
            cols, ho, wo = _im2col(x, spec.kernel)
            cache.append((x.shape, cols, ho, wo))
            out = cols @ w.reshape(w.shape[0], -1).T + b
            x = out.reshape(x.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)
        elif spec.kind == "relu":
            cache.append(x > 0)
            x = np.maximum(x, 0.0)
        elif spec.kind == "flatten":
            cache.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        outputs.append(x)
    return x, cache, outputs


def _backprop(model, cache, grad):
    """Propagate ``grad`` (d loss / d logits) back; returns (param grads, d loss / d input)."""
    desc = model.descriptor
    pgrads = []
    pi = len(model.params)
    for spec, saved in zip(reversed(desc.layers), reversed(cache)):
        if spec.kind == "dense":
            pi -= 1
            w, _ = model.params[pi]
            pgrads.append((saved.T @ grad, grad.sum(axis=0)))
            grad = grad @ w.T
        elif spec.kind == "conv2d":
            pi -= 1
            w, _ = model.params[pi]
            in_shape, cols, ho, wo = saved
            n, c = in_shape[0], in_shape[1]
            k = spec.kernel
            g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
            pgrads.append(((g.T @ cols).reshape(w.shape), g.sum(axis=0)))
            dcols = (g @ w.reshape(w.shape[0], -1)).reshape(n, ho, wo, c, k, k)
            dx = np.zeros(in_shape)
            for di in range(k):
                for dj in range(k):
                    dx[:, :, di:di + ho, dj:dj + wo] += dcols[..., di, dj].transpose(0, 3, 1, 2)
            grad = dx
        elif spec.kind == "relu":
            grad = grad * saved
        elif spec.kind == "flatten":
            grad = grad.reshape(saved)
    return pgrads[::-1], grad


def forward(model: TrainedModel, x, capture=True):
    """Return ``(logits, activations)``.

    ``activations`` maps layer index to an ``n x features`` matrix for every
    capturable layer (post-ReLU outputs and the logits); conv outputs are
    flattened in (channel, height, width) order.
    """
    batch = _as_batch(model.descriptor, x)
    logits, _, outputs = _run(model, batch)
    acts = {}
    if capture:
        for i in model.descriptor.capturable_layers():
            acts[i] = outputs[i].reshape(batch.shape[0], -1)
    return logits, acts


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits, y):
    """Per-example softmax cross-entropy."""
    y = np.asarray(y, dtype=np.int64)
    return -_log_softmax(logits)[np.arange(len(y)), y]


def loss(model, x, y):
    logits, _ = forward(model, x, capture=False)
    return cross_entropy(logits, y)


def _dlogits(logits, y):
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(y)), y] -= 1.0
    return p


def input_gradient(model: TrainedModel, x, y) -> np.ndarray:
    """Gradient of each example's cross-entropy w.r.t. its own input, shaped like ``x``.

    The batch loss is the sum of per-example losses, so row i depends only on
    example i.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = _as_batch(model.descriptor, x)
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (batch.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch of {batch.shape[0]}")
    logits, cache, _ = _run(model, batch)
    _, dx = _backprop(model, cache, _dlogits(logits, y))
    return dx.reshape(x.shape)


@dataclass(frozen=True)
class Hyperparams:
    epochs: int = 30
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0
    subsample: float = 1.0


def _subsample_indices(labels, fraction, rng):
    if fraction >= 1.0:
        return np.arange(len(labels))
    keep = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = max(1, int(round(len(idx) * fraction)))
        keep.append(rng.permutation(idx)[:k])
    return np.sort(np.concatenate(keep))


def train(descriptor: NetworkDescriptor, dataset: Dataset, hyperparams: Hyperparams = Hyperparams()) -> TrainedModel:
    """Minibatch SGD (no momentum) on mean softmax cross-entropy.

    Records the full-train-set loss before training and after every epoch in
    ``metadata["loss_history"]``.
    """
    hp = hyperparams
    if hp.epochs < 0 or hp.batch_size < 1 or hp.learning_rate <= 0 or not 0 < hp.subsample <= 1:
        raise ConfigError(f"invalid hyperparameters {hp}")
    if dataset.classes != descriptor.classes:
        raise ConfigError(f"{descriptor.model_id}: dataset has {dataset.classes} classes, "
                          f"network expects {descriptor.classes}")
    rng = rng_stream(hp.seed)
    x_all, y_all = dataset.train()
    sel = _subsample_indices(y_all, hp.subsample, rng)
    x_train, y_train = _as_batch(descriptor, x_all[sel]), y_all[sel]

    model = TrainedModel(descriptor, init_params(descriptor))
    history = [float(np.mean(loss(model, x_train, y_train)))]
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(y_train))
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, len(order), hp.batch_size):
                idx = order[start:start + hp.batch_size]
                logits, cache, _ = _run(model, x_train[idx])
                pgrads, _ = _backprop(model, cache, _dlogits(logits, y_train[idx]) / len(idx))
                model.params = [(w - hp.learning_rate * gw, b - hp.learning_rate * gb)
                                for (w, b), (gw, gb) in zip(model.params, pgrads)]
            epoch_loss = float(np.mean(loss(model, x_train, y_train)))
        if not np.isfinite(epoch_loss) or not all(np.all(np.isfinite(w)) for w, _ in model.params):
            raise TrainingError(f"{descriptor.model_id}: training diverged at epoch {epoch}", epoch=epoch)
        history.append(epoch_loss)

    x_test, y_test = dataset.test()
    model.metadata = {
        "epochs": hp.epochs, "learning_rate": hp.learning_rate, "batch_size": hp.batch_size,
        "seed": hp.seed, "subsample": hp.subsample, "n_train": int(len(y_train)),
        "train_accuracy": model.accuracy(x_train, y_train),
        "test_accuracy": model.accuracy(x_test, y_test),
        "loss_history": history,
    }
    return model


# ---------------------------------------------------------------------------
# TRMZ container


def model_to_bytes(model: TrainedModel) -> bytes:
    header = json.dumps({"descriptor": model.descriptor.to_dict(), "metadata": model.metadata},
                        sort_keys=True, separators=(",", ":"))
    tensors = [t for pair in model.params for t in pair]
    parts = [TRMZ_MAGIC, bytes([TRMZ_VERSION]), _binio.pack_text(header), struct.pack("<I", len(tensors))]
    for t in tensors:
        parts.append(bytes([t.ndim]) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(_binio.pack_f32(t))
    return b"".join(parts)


def model_from_bytes(data: bytes) -> TrainedModel:
    r = _binio.Reader(data)
    if r.take(4, "magic") != TRMZ_MAGIC:
        raise FormatError("not a TRMZ model file (bad magic)", offset=0)
    version = r.u8("version")
    if version != TRMZ_VERSION:
        raise FormatError(f"unsupported TRMZ version {version}", offset=4)
    start = r.pos
    try:
        header = json.loads(r.text("header"))
        descriptor = NetworkDescriptor.from_dict(header["descriptor"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed model header: {exc}", offset=start) from exc
    count = r.u32("tensor count")
    expected = init_params(descriptor)
    if count != 2 * len(expected):
        raise FormatError(f"expected {2 * len(expected)} tensors, found {count}", offset=r.pos - 4)
    tensors = []
    for i in range(count):
        at = r.pos
        ndim = r.u8("tensor rank")
        dims = tuple(r.dim("tensor dimension") for _ in range(ndim))
        ref = expected[i // 2][i % 2]
        if dims != ref.shape:
            raise FormatError(f"tensor {i} has shape {dims}, descriptor implies {ref.shape}", offset=at)
        tensors.append(r.f32(int(np.prod(dims)), f"tensor {i}").reshape(dims))
    r.expect_end()
    params = [(tensors[i], tensors[i + 1]) for i in range(0, count, 2)]
    return TrainedModel(descriptor, params, header.get("metadata", {}))


def save_model(model: TrainedModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> TrainedModel:
    return model_from_bytes(Path(path).read_bytes())
