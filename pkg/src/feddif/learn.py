"""Small numpy models, momentum SGD, FedAvg and weight-divergence helpers.

Parameters travel as one flat float vector so that transmission size,
averaging and divergence are all plain vector operations.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from feddif.dist import DiffusionChain, Dol


class TrainingDiverged(RuntimeError):
    def __init__(self, message, round_index=None):
        super().__init__(f"training diverged (round {round_index}): {message}")
        self.round_index = round_index


class ModelKind(str, enum.Enum):
    LOGISTIC = "logistic"
    LINEAR_SVM = "linear_svm"
    MLP = "mlp"


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.LOGISTIC
    n_features: int = 20
    n_classes: int = 2
    hidden: int = 16
    l2: float = 1e-4
    bits_per_param: int = 32

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.n_features < 1 or self.n_classes < 2 or self.hidden < 1:
            raise ValueError("invalid model dimensions")

    @property
    def n_outputs(self) -> int:
        if self.kind is ModelKind.MLP or self.n_classes > 2:
            return self.n_classes
        return 1

    @property
    def n_params(self) -> int:
        d, k = self.n_features, self.n_outputs
        if self.kind is ModelKind.MLP:
            return self.hidden * (d + 1) + k * (self.hidden + 1)
        return k * (d + 1)


@dataclass(frozen=True)
class ModelParams:
    weights: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.spec.n_params,):
            raise ValueError(f"expected {self.spec.n_params} weights, got shape {w.shape}")
        object.__setattr__(self, "weights", w)

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind

    @property
    def bit_size(self) -> int:
        return self.weights.size * self.spec.bits_per_param

    def with_weights(self, weights) -> "ModelParams":
        return replace(self, weights=np.asarray(weights, dtype=float))


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    local_epochs: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("hp.learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("hp.momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ValueError("hp.batch_size and hp.local_epochs must be >= 1")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=int)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y disagree on the number of samples")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.y.size

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], self.y[idx], self.n_classes)


@dataclass
class LocalModel:
    params: ModelParams
    dol: Dol
    chain: DiffusionChain = field(default_factory=DiffusionChain)
    holder: int = -1


# ---------------------------------------------------------------- models

def _unpack(spec: ModelSpec, w: np.ndarray):
    d, k = spec.n_features, spec.n_outputs
    if spec.kind is ModelKind.MLP:
        h = spec.hidden
        a = h * d
        W1 = w[:a].reshape(h, d)
        b1 = w[a : a + h]
        W2 = w[a + h : a + h + k * h].reshape(k, h)
        b2 = w[a + h + k * h :]
        return W1, b1, W2, b2
    Wb = w.reshape(k, d + 1)
    return Wb[:, :d], Wb[:, d]


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def scores(params: ModelParams, X) -> np.ndarray:
    spec, w = params.spec, params.weights
    X = np.atleast_2d(X)
    if spec.kind is ModelKind.MLP:
        W1, b1, W2, b2 = _unpack(spec, w)
        return np.tanh(X @ W1.T + b1) @ W2.T + b2
    W, b = _unpack(spec, w)
    return X @ W.T + b


def predict(params: ModelParams, X) -> np.ndarray:
    z = scores(params, X)
    if z.shape[1] == 1:
        return (z[:, 0] > 0).astype(int)
    return np.argmax(z, axis=1)


def loss_and_grad(params: ModelParams, X, y):
    """Mean training loss and its gradient w.r.t. the flat weight vector."""
    spec, w = params.spec, params.weights
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    n, d = X.shape
    if spec.kind is ModelKind.MLP:
        W1, b1, W2, b2 = _unpack(spec, w)
        hid = np.tanh(X @ W1.T + b1)
        logp = _log_softmax(hid @ W2.T + b2)
        loss = -logp[np.arange(n), y].mean()
        dz = np.exp(logp)
        dz[np.arange(n), y] -= 1.0
        dz /= n
        gW2 = dz.T @ hid
        gb2 = dz.sum(axis=0)
        dh = (dz @ W2) * (1.0 - hid ** 2)
        gW1 = dh.T @ X
        gb1 = dh.sum(axis=0)
        loss += 0.5 * spec.l2 * (np.sum(W1 ** 2) + np.sum(W2 ** 2))
        gW1 += spec.l2 * W1
        gW2 += spec.l2 * W2
        return float(loss), np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    W, b = _unpack(spec, w)
    z = X @ W.T + b
    k = spec.n_outputs
    if spec.kind is ModelKind.LOGISTIC:
        if k == 1:
            z1 = z[:, 0]
            loss = np.mean(np.logaddexp(0.0, z1) - y * z1)
            dz = (_sigmoid(z1) - y)[:, None] / n
        else:
            logp = _log_softmax(z)
            loss = -logp[np.arange(n), y].mean()
            dz = np.exp(logp)
            dz[np.arange(n), y] -= 1.0
            dz /= n
    else:
        # One-vs-rest hinge with targets in {-1, +1}.
        if k == 1:
            t = (2 * y - 1)[:, None].astype(float)
        else:
            t = -np.ones((n, k))
            t[np.arange(n), y] = 1.0
        margin = 1.0 - t * z
        active = margin > 0
        loss = np.sum(margin * active) / n
        dz = -(t * active) / n
    gW = dz.T @ X + spec.l2 * W
    gb = dz.sum(axis=0)
    loss += 0.5 * spec.l2 * np.sum(W ** 2)
    return float(loss), np.concatenate([gW, gb[:, None]], axis=1).ravel()


def dataset_loss(params: ModelParams, data: Dataset) -> float:
    return loss_and_grad(params, data.X, data.y)[0]


# Pass thresholds for gradient_check.  A coordinate whose analytic value is
# exactly 0 scores |fd| / 1e-8, so rounding noise in fd sets the floor.
GRAD_TOL = {ModelKind.LOGISTIC: 1e-4, ModelKind.LINEAR_SVM: 1e-3, ModelKind.MLP: 1e-3}
# The hinge loss is linear between kinks, so a wide step costs no truncation
# error there and keeps cancellation noise under the zero-gradient floor.
FD_STEP = {ModelKind.LOGISTIC: 1e-5, ModelKind.LINEAR_SVM: 1e-3, ModelKind.MLP: 1e-5}


def hinge_clearance(params: ModelParams, X, y) -> float:
    """Smallest distance of any SVM margin from its hinge; inf for other kinds."""
    if params.kind is not ModelKind.LINEAR_SVM:
        return math.inf
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    z = scores(params, X)
    if params.spec.n_outputs == 1:
        t = (2 * y - 1)[:, None].astype(float)
    else:
        t = -np.ones_like(z)
        t[np.arange(y.size), y] = 1.0
    return float(np.min(np.abs(1.0 - t * z)))


def gradient_check(params: ModelParams, X, y, h: Optional[float] = None) -> float:
    """Max over coordinates of |analytic - fd| / (|analytic| + 1e-8).

    ``fd`` is the central difference with step ``h`` (default
    ``FD_STEP[kind]``); compare the result to ``GRAD_TOL[kind]``.  For the
    SVM, inputs must keep every margin more than ``h * |x|`` from the hinge.
    """
    h = FD_STEP[params.kind] if h is None else h
    _, grad = loss_and_grad(params, X, y)
    w = params.weights
    worst = 0.0
    for j in range(w.size):
        e = np.zeros_like(w)
        e[j] = h
        up = loss_and_grad(params.with_weights(w + e), X, y)[0]
        down = loss_and_grad(params.with_weights(w - e), X, y)[0]
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grad[j] - fd) / (abs(grad[j]) + 1e-8))
    return worst


def init_params(spec: ModelSpec, rng, scheme: str = "uniform", scale: float = 0.05) -> ModelParams:
    n = spec.n_params
    if scheme == "uniform":
        w = rng.uniform(-scale, scale, n)
    elif scheme == "normal":
        w = rng.normal(0.0, scale, n)
    elif scheme == "zeros":
        w = np.zeros(n)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return ModelParams(w, spec)


# -------------------------------------------------------------- training

def sgd_epochs(params: ModelParams, data: Dataset, hp: Hyperparams, epochs: int, rng,
               round_index=None) -> ModelParams:
    """Mini-batch SGD with momentum; velocity starts at zero on every call."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.n_features != params.spec.n_features:
        raise ValueError("dataset feature count does not match the model")
    w = params.weights.copy()
    if hp.learning_rate == 0 or epochs == 0:
        return params.with_weights(w)
    vel = np.zeros_like(w)
    probe = params
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), hp.batch_size):
            batch = order[start : start + hp.batch_size]
            probe = params.with_weights(w)
            # Overflow is expected on the way to divergence and is caught below.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = loss_and_grad(probe, data.X[batch], data.y[batch])
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise TrainingDiverged(f"non-finite loss {loss!r}", round_index)
            vel = hp.momentum * vel + grad
            w = w - hp.learning_rate * vel
    if not np.all(np.isfinite(w)):
        raise TrainingDiverged("non-finite weights", round_index)
    return params.with_weights(w)


def local_train(params: ModelParams, data: Dataset, hp: Hyperparams, rng,
                round_index=None) -> ModelParams:
    return sgd_epochs(params, data, hp, hp.local_epochs, rng, round_index)


def centralized_oracle(init: ModelParams, data: Dataset, hp: Hyperparams, epochs: int,
                       rng) -> ModelParams:
    """Reference model trained on the pooled dataset from the shared init."""
    return sgd_epochs(init, data, hp, epochs, rng)


def weighted_average(params_list, sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=float)
    if sizes.sum() <= 0:
        raise ValueError("total data size must be positive")
    shapes = {p.weights.shape for p in params_list}
    kinds = {p.spec for p in params_list}
    if len(shapes) != 1 or len(kinds) != 1:
        raise ValueError("models disagree on kind or dimension")
    stacked = np.stack([p.weights for p in params_list])
    terms = (sizes / sizes.sum())[:, None] * stacked
    # fsum is correctly rounded, so the result is independent of list order.
    return np.array([math.fsum(col) for col in terms.T])


def fedavg(models) -> ModelParams:
    """Average local models weighted by the data their chains trained on."""
    if not models:
        raise ValueError("fedavg needs at least one model")
    params = [m.params for m in models]
    sizes = [m.chain.total_size for m in models]
    return params[0].with_weights(weighted_average(params, sizes))


def weight_divergence(global_params: ModelParams, central: ModelParams) -> float:
    if global_params.weights.shape != central.weights.shape:
        raise ValueError("parameter dimensions differ")
    return float(np.linalg.norm(global_params.weights - central.weights))


def evaluate(params: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("test set is empty")
    return float(np.mean(predict(params, data.X) == data.y))


# ------------------------------------------------------------------ data

def gaussian_centres(n_features: int, n_classes: int, rng, separation: float = 1.0,
                     clusters_per_class: int = 1) -> np.ndarray:
    return rng.normal(0.0, separation, (n_classes, clusters_per_class, n_features))


def sample_mixture(centres: np.ndarray, n_per_class: int, rng) -> Dataset:
    """Exactly class-balanced draw of unit-variance clusters around ``centres``."""
    n_classes, n_clusters, n_features = centres.shape
    X, y = [], []
    for c in range(n_classes):
        which = rng.integers(0, n_clusters, n_per_class)
        X.append(centres[c, which] + rng.normal(0.0, 1.0, (n_per_class, n_features)))
        y.append(np.full(n_per_class, c))
    X = np.concatenate(X)
    y = np.concatenate(y)
    order = rng.permutation(y.size)
    return Dataset(X[order], y[order], n_classes)


def load_dataset(path, n_classes=None) -> Dataset:
    """Load ``label, f1, ..., fd`` rows from CSV, or arrays ``X``/``y`` from NPZ.

    A CSV header row is allowed if its first cell is ``label``.
    """
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            X, y = z["X"], z["y"]
    else:
        rows = []
        with path.open(newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                if row[0].strip().lower() == "label":
                    continue
                rows.append([float(v) for v in row])
        if not rows:
            raise ValueError(f"{path}: no data rows")
        arr = np.asarray(rows)
        y, X = arr[:, 0], arr[:, 1:]
    y = np.asarray(y).astype(int)
    if np.any(y < 0):
        raise ValueError(f"{path}: labels must be non-negative integers")
    return Dataset(X, y, int(n_classes or y.max() + 1))
