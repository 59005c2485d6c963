"""Reference learners trained by gradient descent on binary cross-entropy.

Two learners share one training loop: logistic regression and a
one-hidden-layer tanh MLP. Training keeps the parameter snapshot with
the lowest validation loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import InvalidInputError

EPS = 1e-12


class DegenerateTrainingError(ValueError):
    pass


class TrainingFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    learner: str = "logistic"  # "logistic" or "mlp"
    hidden_width: int = 16
    max_epochs: int = 40
    batch_size: int | None = 64  # None -> full batch
    initial_learning_rate: float = 0.05
    lr_decay: float = 0.97
    early_stop_patience: int = 10
    weight_decay: float = 0.0  # L2 penalty on weights (not biases)
    seed: int = 0

    def __post_init__(self):
        if self.learner not in ("logistic", "mlp"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if not self.initial_learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    @property
    def name(self) -> str:
        return "logistic" if self.learner == "logistic" else f"mlp{self.hidden_width}"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainerConfig:
        return cls(**d)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(scores, labels) -> float:
    """Mean binary cross-entropy with scores clamped to [1e-12, 1 - 1e-12]."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if s.size == 0:
        raise InvalidInputError("bce_loss of empty input")
    if s.shape != y.shape:
        raise InvalidInputError("scores and labels differ in shape")
    s = np.clip(s, EPS, 1 - EPS)
    return float(-np.mean(y * np.log(s) + (1 - y) * np.log1p(-s)))


# -- learner kernels ----------------------------------------------------------
# Each learner works on a flat parameter vector so the training loop,
# gradient checks and serialisation are shared.

def _unpack_mlp(theta, d, h):
    W1 = theta[: d * h].reshape(d, h)
    b1 = theta[d * h: d * h + h]
    w2 = theta[d * h + h: d * h + 2 * h]
    b2 = theta[-1]
    return W1, b1, w2, b2


def n_params(kind: str, d: int, h: int = 0) -> int:
    return d + 1 if kind == "logistic" else d * h + 2 * h + 1


def decision(kind: str, theta: np.ndarray, X: np.ndarray, h: int = 0) -> np.ndarray:
    if kind == "logistic":
        return X @ theta[:-1] + theta[-1]
    W1, b1, w2, b2 = _unpack_mlp(theta, X.shape[1], h)
    return np.tanh(X @ W1 + b1) @ w2 + b2


def weight_mask(kind: str, d: int, h: int = 0) -> np.ndarray:
    """True for weight entries, False for biases."""
    m = np.ones(n_params(kind, d, h), dtype=bool)
    m[-1] = False
    if kind == "mlp":
        m[d * h: d * h + h] = False
    return m


def loss_and_grad(kind: str, theta: np.ndarray, X: np.ndarray, y: np.ndarray, h: int = 0,
                  weight_decay: float = 0.0):
    """Mean BCE (plus optional L2 on weights) and its gradient w.r.t. the flat parameters."""
    n = X.shape[0]
    if kind == "logistic":
        z = X @ theta[:-1] + theta[-1]
    else:
        W1, b1, w2, b2 = _unpack_mlp(theta, X.shape[1], h)
        a = np.tanh(X @ W1 + b1)
        z = a @ w2 + b2
    # log(1 + e^z) - y z, computed stably
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    r = (sigmoid(z) - y) / n
    if kind == "logistic":
        grad = np.concatenate([X.T @ r, [r.sum()]])
    else:
        da = np.outer(r, w2) * (1 - a * a)
        grad = np.concatenate([(X.T @ da).ravel(), da.sum(0), a.T @ r, [r.sum()]])
    if weight_decay:
        w = np.where(weight_mask(kind, X.shape[1], h), theta, 0.0)
        loss += 0.5 * weight_decay * float(w @ w)
        grad = grad + weight_decay * w
    return loss, grad


def _init(kind: str, d: int, h: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "logistic":
        return np.zeros(d + 1)
    W1 = rng.standard_normal((d, h)) / np.sqrt(d)
    w2 = rng.standard_normal(h) / np.sqrt(h)
    return np.concatenate([W1.ravel(), np.zeros(h), w2, [0.0]])


@dataclass(frozen=True, eq=False)
class ScoreModel:
    kind: str
    input_dim: int
    params: np.ndarray
    hidden_width: int = 0
    history: tuple = field(default=())  # (epoch, train_loss, val_loss)
    best_epoch: int = 0

    def __post_init__(self):
        p = np.array(self.params, dtype=float)
        if p.size != n_params(self.kind, self.input_dim, self.hidden_width):
            raise ValueError("parameter vector has wrong length")
        if not np.isfinite(p).all():
            raise ValueError("non-finite parameters")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise InvalidInputError(f"expected inputs of width {self.input_dim}, got shape {X.shape}")
        return sigmoid(decision(self.kind, self.params, X, self.hidden_width))

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "input_dim": self.input_dim, "hidden_width": self.hidden_width,
                           "params": self.params.tolist(), "best_epoch": self.best_epoch,
                           "history": [list(r) for r in self.history]})

    @classmethod
    def from_json(cls, text: str) -> ScoreModel:
        d = json.loads(text)
        return cls(d["kind"], d["input_dim"], np.array(d["params"]), d["hidden_width"],
                   tuple(tuple(r) for r in d["history"]), d["best_epoch"])


def score(model: ScoreModel, features) -> float | np.ndarray:
    """Score one feature vector (returns a float) or a 2-D batch (returns an array)."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        return float(model.predict_proba(x[None, :])[0])
    return model.predict_proba(x)


def train(X_train, y_train, X_val, y_val, config: TrainerConfig) -> ScoreModel:
    X_train = np.asarray(X_train, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    y_train = np.asarray(y_train, dtype=float)
    y_val = np.asarray(y_val, dtype=float)
    if len(X_train) == 0 or len(X_val) == 0:
        raise DegenerateTrainingError("train and val sets must be non-empty")
    if np.unique(y_train).size < 2:
        raise DegenerateTrainingError("training labels contain a single class")

    kind = config.learner
    h = config.hidden_width if kind == "mlp" else 0
    d = X_train.shape[1]
    rng = np.random.default_rng(config.seed)
    theta = _init(kind, d, h, rng)
    n = len(X_train)
    bs = n if config.batch_size is None else min(config.batch_size, n)

    best = theta.copy()
    best_val = np.inf
    best_epoch = 0
    stale = 0
    history = []
    lr = config.initial_learning_rate
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n) if bs < n else np.arange(n)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is caught below
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                _, g = loss_and_grad(kind, theta, X_train[idx], y_train[idx], h, config.weight_decay)
                theta = theta - lr * g
            # unpenalised BCE is what gets monitored
            train_loss = bce_loss(sigmoid(decision(kind, theta, X_train, h)), y_train)
            val_loss = bce_loss(sigmoid(decision(kind, theta, X_val, h)), y_val)
        lr *= config.lr_decay
        if not (np.isfinite(train_loss) and np.isfinite(val_loss) and np.isfinite(theta).all()):
            raise TrainingFailedError(f"non-finite loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best, best_val, best_epoch, stale = theta.copy(), val_loss, epoch, 0
        else:
            stale += 1
            if stale > config.early_stop_patience:
                break
    return ScoreModel(kind, d, best, h, tuple(history), best_epoch)
