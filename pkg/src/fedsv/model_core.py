"""Small numpy classifiers, SGD local training and evaluation.

Parameters always travel as a flat float64 vector (a "param vector"). An
``Architecture`` knows how to slice that vector into weight matrices, so the
server side never has to care about layer shapes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DivergenceError, EmptyDataError, ShapeError

LOGISTIC = "multinomial-logistic"
MLP = "mlp-1-hidden"
ARCHITECTURES = (LOGISTIC, MLP)

INIT_SCALE = 0.05


# ---------------------------------------------------------------- vector ops

def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"param vectors differ in shape: {a.shape} vs {b.shape}")
    return a, b


def add(a, b):
    a, b = _check_pair(a, b)
    return a + b


def scale(a, factor):
    return float(factor) * np.asarray(a, dtype=np.float64)


def negate(a):
    return -np.asarray(a, dtype=np.float64)


def l2_distance(a, b):
    a, b = _check_pair(a, b)
    return float(np.linalg.norm(a - b))


# ------------------------------------------------------------- architectures

@dataclass(frozen=True)
class Architecture:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0

    def __post_init__(self):
        if self.kind not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ValueError("input_dim and num_classes must be positive")
        if self.kind == MLP and self.hidden_dim < 1:
            raise ValueError("mlp needs hidden_dim >= 1")

    @property
    def num_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == LOGISTIC:
            return (d + 1) * c
        return (d + 1) * h + (h + 1) * c

    def unpack(self, params):
        """Views of ``params`` as (W, b) or (W1, b1, W2, b2)."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.num_params,):
            raise ShapeError(f"expected {self.num_params} params, got {params.shape}")
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == LOGISTIC:
            return params[: c * d].reshape(c, d), params[c * d:]
        o = 0
        w1 = params[o:o + h * d].reshape(h, d); o += h * d
        b1 = params[o:o + h]; o += h
        w2 = params[o:o + c * h].reshape(c, h); o += c * h
        b2 = params[o:o + c]
        return w1, b1, w2, b2

    def init_params(self, rng) -> np.ndarray:
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=self.num_params)


@dataclass
class Model:
    arch: Architecture
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.num_params,):
            raise ShapeError(
                f"{self.arch.kind} expects {self.arch.num_params} params, got {self.params.shape}")

    @classmethod
    def initialize(cls, arch: Architecture, rng) -> "Model":
        return cls(arch, arch.init_params(rng))

    @classmethod
    def zeros(cls, arch: Architecture) -> "Model":
        return cls(arch, np.zeros(arch.num_params))

    def with_params(self, params) -> "Model":
        return replace(self, params=np.array(params, dtype=np.float64))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 5
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------ forward / loss

def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(arch, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"features have shape {np.shape(features)}, model expects "
                         f"input_dim={arch.input_dim}")
    return x


def logits(params, arch: Architecture, features) -> np.ndarray:
    x = _as_batch(arch, features)
    if arch.kind == LOGISTIC:
        w, b = arch.unpack(params)
        return x @ w.T + b
    w1, b1, w2, b2 = arch.unpack(params)
    return np.tanh(x @ w1.T + b1) @ w2.T + b2


def predict_proba(params, arch: Architecture, features) -> np.ndarray:
    return _softmax(logits(params, arch, features))


def forward(model: Model, features) -> np.ndarray:
    """Class probabilities for a single feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.arch.input_dim,):
        raise ShapeError(f"expected a feature vector of length {model.arch.input_dim}, "
                         f"got shape {x.shape}")
    return predict_proba(model.params, model.arch, x)[0]


def loss_and_grad(params, arch: Architecture, features, labels):
    """Mean cross-entropy and its gradient w.r.t. the flat param vector."""
    x = _as_batch(arch, features)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataError("cannot compute a loss on zero samples")
    rows = np.arange(n)
    grad = np.empty(arch.num_params)

    if arch.kind == LOGISTIC:
        w, b = arch.unpack(params)
        z = x @ w.T + b
        logp = _log_softmax(z)
        g = np.exp(logp)
        g[rows, y] -= 1.0
        g /= n
        gw, gb = arch.unpack(grad)
        gw[...] = g.T @ x
        gb[...] = g.sum(axis=0)
    else:
        w1, b1, w2, b2 = arch.unpack(params)
        h = np.tanh(x @ w1.T + b1)
        z = h @ w2.T + b2
        logp = _log_softmax(z)
        g = np.exp(logp)
        g[rows, y] -= 1.0
        g /= n
        gw1, gb1, gw2, gb2 = arch.unpack(grad)
        gw2[...] = g.T @ h
        gb2[...] = g.sum(axis=0)
        dz = (g @ w2) * (1.0 - h * h)
        gw1[...] = dz.T @ x
        gb1[...] = dz.sum(axis=0)

    loss = -float(logp[rows, y].mean())
    return loss, grad


# ---------------------------------------------------------- train / evaluate

def local_train(model: Model, shard, cfg: TrainConfig, rng=None) -> np.ndarray:
    """Run ``cfg.epochs`` epochs of mini-batch SGD from ``model.params``.

    ``shard`` is anything with ``.features``/``.labels`` (a LabeledDataset) or
    a ClientShard wrapping one. Batch order is reshuffled once per epoch from
    ``rng``; when no generator is passed one is seeded from ``cfg.seed``. Passing
    the same generator to successive one-epoch calls reproduces a multi-epoch
    call exactly.
    """
    data = getattr(shard, "data", shard)
    x = np.asarray(data.features, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataError("local_train on an empty shard")
    if not np.all(np.isfinite(model.params)):
        raise DivergenceError(epoch=0)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    arch = model.arch
    params = model.params.copy()
    lr, bs = cfg.learning_rate, cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss, grad = loss_and_grad(params, arch, x[idx], y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch=epoch)
            params -= lr * grad
        if not np.all(np.isfinite(params)):
            raise DivergenceError(epoch=epoch)
    return params


def evaluate(params, arch: Architecture, dataset):
    """(mean cross-entropy, accuracy) of ``params`` on ``dataset``."""
    x = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise EmptyDataError("evaluate on an empty dataset")
    z = logits(params, arch, x)
    logp = _log_softmax(z)
    loss = -float(logp[np.arange(len(y)), y].mean())
    acc = float(np.mean(np.argmax(z, axis=1) == y))
    return loss, acc


def accuracy(params, arch: Architecture, dataset) -> float:
    x = np.asarray(dataset.features, dtype=np.float64)
    if x.shape[0] == 0:
        raise EmptyDataError("accuracy on an empty dataset")
    return float(np.mean(np.argmax(logits(params, arch, x), axis=1) == dataset.labels))
