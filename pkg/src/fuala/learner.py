"""The pluggable local model: a one-hidden-layer tanh perceptron with an
explicit body/head parameter split, trained by plain mini-batch SGD on binary
cross-entropy.

The split matters to the protocol: the body is the shared feature extractor
and the head is the final logistic layer that is kept per hospital for
prediction-time ensembling. Everything here is pure: training returns new
parameters and never mutates its inputs, so results are bit-reproducible for
a given seed and safe to run concurrently across hospitals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import FeatureVector
from .errors import NumericalError, ValidationError

MODEL_SCHEMA = "fuala-model/1"

# Probability clamp for the cross-entropy loss.
_EPS = 1e-12


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function (log-sum-exp-stable form)."""
    scalar = np.ndim(z) == 0
    arr = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ez = np.exp(arr[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out[0]) if scalar else out


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: input width V and hidden width H."""

    vocab_size: int
    hidden_dim: int

    def __post_init__(self) -> None:
        if self.vocab_size < 1 or self.hidden_dim < 1:
            raise ValidationError(f"invalid architecture {self}")

    @property
    def n_params(self) -> int:
        v, h = self.vocab_size, self.hidden_dim
        return h * v + h + h + 1


@dataclass(frozen=True)
class Body:
    """Input-to-hidden parameters (tanh nonlinearity)."""

    W1: np.ndarray  # (H, V)
    b1: np.ndarray  # (H,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "W1", _frozen(self.W1))
        object.__setattr__(self, "b1", _frozen(self.b1))
        if not (np.isfinite(self.W1).all() and np.isfinite(self.b1).all()):
            raise ValidationError("body parameters must be finite")


@dataclass(frozen=True)
class Head:
    """Hidden-to-output logistic layer; the per-hospital ensemble member."""

    W2: np.ndarray  # (H,)
    b2: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "W2", _frozen(self.W2))
        object.__setattr__(self, "b2", float(self.b2))
        if not (np.isfinite(self.W2).all() and np.isfinite(self.b2)):
            raise ValidationError("head parameters must be finite")

    def as_flat(self) -> np.ndarray:
        return np.concatenate([self.W2, [self.b2]])

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "Head":
        flat = np.asarray(flat, dtype=np.float64)
        return cls(W2=flat[:-1], b2=float(flat[-1]))


@dataclass(frozen=True)
class ModelParams:
    """The full parameter set exchanged over the wire."""

    body: Body
    head: Head
    arch: Arch

    def __post_init__(self) -> None:
        v, h = self.arch.vocab_size, self.arch.hidden_dim
        if self.body.W1.shape != (h, v) or self.body.b1.shape != (h,):
            raise ValidationError(
                f"body shape {self.body.W1.shape}/{self.body.b1.shape} "
                f"inconsistent with arch {self.arch}"
            )
        if self.head.W2.shape != (h,):
            raise ValidationError(
                f"head shape {self.head.W2.shape} inconsistent with arch {self.arch}"
            )

    def with_head(self, head: Head) -> "ModelParams":
        return ModelParams(body=self.body, head=head, arch=self.arch)


@dataclass(frozen=True)
class LearnerConfig:
    """Local SGD hyperparameters."""

    learning_rate: float = 0.03
    batch_size: int = 32
    epochs: int = 5
    hidden_dim: int = 16
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 0 or self.hidden_dim < 1:
            raise ValidationError(f"invalid learner config {self}")
        if self.init_scale < 0:
            raise ValidationError(f"init_scale must be >= 0, got {self.init_scale}")


def init_model(arch: Arch, cfg: LearnerConfig) -> ModelParams:
    """Seeded init: weights ~ Uniform(-init_scale, +init_scale), zero biases."""
    if cfg.hidden_dim != arch.hidden_dim:
        raise ValidationError(
            f"config hidden_dim {cfg.hidden_dim} != arch hidden_dim {arch.hidden_dim}"
        )
    rng = np.random.default_rng(cfg.seed)
    v, h = arch.vocab_size, arch.hidden_dim
    W1 = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(h, v))
    W2 = rng.uniform(-cfg.init_scale, cfg.init_scale, size=h)
    return ModelParams(
        body=Body(W1=W1, b1=np.zeros(h)),
        head=Head(W2=W2, b2=0.0),
        arch=arch,
    )


def _as_matrix(x: FeatureVector | np.ndarray) -> np.ndarray:
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    return values.reshape(1, -1)


def _hidden(body: Body, X: np.ndarray) -> np.ndarray:
    return np.tanh(X @ body.W1.T + body.b1)


def scores(body: Body, head: Head, X: np.ndarray) -> np.ndarray:
    """Batch forward pass: per-row probability of the positive class."""
    return sigmoid(_hidden(body, X) @ head.W2 + head.b2)


def predict_proba(params: ModelParams, x: FeatureVector | np.ndarray) -> float:
    """sigmoid(W2 . tanh(W1 x + b1) + b2) for a single sample."""
    X = _as_matrix(x)
    if X.shape[1] != params.arch.vocab_size:
        raise ValidationError(
            f"sample has {X.shape[1]} features, model expects {params.arch.vocab_size}"
        )
    return float(scores(params.body, params.head, X)[0])


def predict_with_head(body: Body, head: Head, x: FeatureVector | np.ndarray) -> float:
    """Forward pass with an arbitrary head substituted on the shared body."""
    X = _as_matrix(x)
    if X.shape[1] != body.W1.shape[1]:
        raise ValidationError(
            f"sample has {X.shape[1]} features, body expects {body.W1.shape[1]}"
        )
    return float(scores(body, head, X)[0])


def as_xy(data: Sequence[FeatureVector] | tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a dataset to an (X, y) matrix pair."""
    if isinstance(data, tuple):
        X, y = data
        return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(data) == 0:
        raise ValidationError("empty dataset")
    X = np.stack([fv.values for fv in data])
    y = np.array([fv.label for fv in data], dtype=np.float64)
    return X, y


def _batch_grads(
    body: Body, head: Head, X: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float, np.ndarray]:
    """Gradients of mean BCE over the batch, plus the pre-sigmoid logits."""
    hid = _hidden(body, X)
    z = hid @ head.W2 + head.b2
    p = sigmoid(z)
    g = (p - y) / len(y)              # dL/dz, already mean-scaled
    dW2 = hid.T @ g
    db2 = float(g.sum())
    dhid = np.outer(g, head.W2) * (1.0 - hid * hid)
    dW1 = dhid.T @ X
    db1 = dhid.sum(axis=0)
    return dW1, db1, dW2, db2, z


def loss(params: ModelParams, data: Sequence[FeatureVector] | tuple[np.ndarray, np.ndarray]) -> float:
    """Mean binary cross-entropy, probabilities clamped to [1e-12, 1 - 1e-12]."""
    X, y = as_xy(data)
    if len(y) == 0:
        raise ValidationError("empty dataset")
    p = np.clip(scores(params.body, params.head, X), _EPS, 1.0 - _EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_gradient(
    params: ModelParams, data: Sequence[FeatureVector] | tuple[np.ndarray, np.ndarray]
) -> np.ndarray:
    """Analytic gradient of `loss` w.r.t. the flat parameter vector."""
    X, y = as_xy(data)
    dW1, db1, dW2, db2, _ = _batch_grads(params.body, params.head, X, y)
    return np.concatenate([dW1.ravel(), db1, dW2, [db2]])


def train_epochs(
    params: ModelParams,
    data: Sequence[FeatureVector] | tuple[np.ndarray, np.ndarray],
    cfg: LearnerConfig,
    rng_seed: int | Sequence[int],
) -> ModelParams:
    """Run ``cfg.epochs`` epochs of mini-batch SGD and return new parameters.

    Each epoch reshuffles from the stream seeded by ``rng_seed``; the last
    incomplete mini-batch is kept. The input ``params`` are not modified.
    """
    X, y = as_xy(data)
    n = len(y)
    if n == 0:
        raise ValidationError("empty dataset")
    if X.shape[1] != params.arch.vocab_size:
        raise ValidationError(
            f"data has {X.shape[1]} features, model expects {params.arch.vocab_size}"
        )
    rng = np.random.default_rng(rng_seed)
    lr = cfg.learning_rate
    W1 = params.body.W1.copy()
    b1 = params.body.b1.copy()
    W2 = params.head.W2.copy()
    b2 = params.head.b2
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            body = Body(W1=W1, b1=b1)
            head = Head(W2=W2, b2=b2)
            dW1, db1, dW2, db2, z = _batch_grads(body, head, X[idx], y[idx])
            if not np.isfinite(z).all():
                raise NumericalError(
                    f"non-finite logits at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            W1 = W1 - lr * dW1
            b1 = b1 - lr * db1
            W2 = W2 - lr * dW2
            b2 = b2 - lr * db2
    return ModelParams(body=Body(W1=W1, b1=b1), head=Head(W2=W2, b2=b2), arch=params.arch)


def params_as_flat_vector(params: ModelParams) -> np.ndarray:
    """Canonical flat layout: W1 row-major, b1, W2, b2."""
    return np.concatenate(
        [params.body.W1.ravel(), params.body.b1, params.head.W2, [params.head.b2]]
    )


def flat_vector_as_params(flat: Sequence[float], arch: Arch) -> ModelParams:
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (arch.n_params,):
        raise ValidationError(
            f"flat vector has length {flat.shape}, arch {arch} expects {arch.n_params}"
        )
    v, h = arch.vocab_size, arch.hidden_dim
    W1 = flat[: h * v].reshape(h, v)
    b1 = flat[h * v : h * v + h]
    W2 = flat[h * v + h : h * v + 2 * h]
    b2 = float(flat[-1])
    return ModelParams(body=Body(W1=W1, b1=b1), head=Head(W2=W2, b2=b2), arch=arch)


def save_model(params: ModelParams, path: str) -> None:
    """Write a portable text checkpoint with full float round-trip precision."""
    obj = {
        "schema": MODEL_SCHEMA,
        "arch": {
            "vocab_size": params.arch.vocab_size,
            "hidden_dim": params.arch.hidden_dim,
        },
        "flat": params_as_flat_vector(params).tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, separators=(",", ":"))
        fh.write("\n")


def load_model(path: str) -> ModelParams:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("schema") != MODEL_SCHEMA:
        raise ValidationError(
            f"expected schema {MODEL_SCHEMA!r}, got {obj.get('schema')!r} in {path!r}"
        )
    arch = Arch(
        vocab_size=int(obj["arch"]["vocab_size"]),
        hidden_dim=int(obj["arch"]["hidden_dim"]),
    )
    return flat_vector_as_params(obj["flat"], arch)


def config_with_seed(cfg: LearnerConfig, seed: int) -> LearnerConfig:
    return replace(cfg, seed=seed)
