"""Served classifier, substitute models and their input-space derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .numerics import (
    CrossEntropy,
    LayerSpec,
    ModelParams,
    Rng,
    adam_init,
    adam_step,
    as_targets,
    backprop,
    backward,
    check_chain,
    forward_cache,
    init_params,
    mlp,
    ShapeError,
)

# default substitute epochs per attack family
SUBSTITUTE_EPOCHS = {"syn": 50, "advpd": 100, "npd": 1000}

ATTACK_FAMILY = {
    "syn_uniform": "syn",
    "jbda": "advpd",
    "fgsm_n": "advpd",
    "fgsm_n_iter": "advpd",
    "fgsm_t_rnd": "advpd",
    "fgsm_t_rnd_iter": "advpd",
    "npd": "npd",
}


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 10
    metric: str = "macro_f1"
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    early_stop: EarlyStop | None = None
    seed: int = 0
    hidden: tuple[int, ...] = (128,)
    dropout: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Classifier:
    specs: list[LayerSpec]
    params: ModelParams
    n_train: int | None = None
    train_accuracy: float | None = None
    history: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.specs or self.specs[-1].kind != "softmax":
            raise ShapeError("a classifier must end in a softmax layer")

    @property
    def d(self) -> int:
        return check_chain(self.specs)[0]

    @property
    def k(self) -> int:
        return check_chain(self.specs)[1]

    @property
    def answered_nothing(self) -> bool:
        return self.n_train == 0

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return predict_proba(self, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict_proba(self, x).argmax(axis=1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return forward_cache(self.params, self.specs, x).acts[-2]


def classifier_specs(d: int, k: int, hidden: Sequence[int] = (128,), dropout: float = 0.2):
    return mlp([d, *hidden, k], output="softmax", dropout_rate=dropout)


def zero_classifier(d: int, k: int, hidden: Sequence[int] = (128,)) -> Classifier:
    """All-zero weights: uniform output, chance-level predictions."""
    specs = classifier_specs(d, k, hidden)
    params = {n: np.zeros_like(p) for n, p in init_params(specs, Rng(0)).items()}
    return Classifier(specs, params, n_train=0)


def predict_proba(c: Classifier, x: np.ndarray) -> np.ndarray:
    return forward_cache(c.params, c.specs, x, training=False).output


def accuracy(c: Classifier, ds: Dataset) -> float:
    if c.answered_nothing:
        return 1.0 / c.k
    return float(np.mean(c.predict(ds.X) == ds.y))


def agreement(a: Classifier, b: Classifier, X: np.ndarray) -> float:
    """Fraction of inputs on which the two models' argmax labels coincide."""
    return float(np.mean(a.predict(X) == b.predict(X)))


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, k: int) -> float:
    scores = []
    for c in range(k):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


def fit(
    specs: list[LayerSpec],
    X: np.ndarray,
    T: np.ndarray,
    cfg: TrainConfig,
    params: ModelParams | None = None,
) -> Classifier:
    """Minimise cross-entropy against label/probability targets ``T`` with Adam."""
    rng = Rng(cfg.seed, (0xC1A5,))
    k = check_chain(specs)[1]
    T = as_targets(T, k)
    X = np.asarray(X, dtype=np.float64)
    X_val = T_val = None
    if cfg.early_stop is not None and len(X) >= 10:
        perm = rng.child("val").generator().permutation(len(X))
        n_val = max(1, int(round(len(X) * cfg.early_stop.validation_fraction)))
        X_val, T_val = X[perm[:n_val]], T[perm[:n_val]]
        X, T = X[perm[n_val:]], T[perm[n_val:]]
    if params is None:
        params = init_params(specs, rng.child("init"))
    state = adam_init(params, lr=cfg.lr)
    shuffle = rng.child("shuffle").generator()
    drop = rng.child("dropout").generator()

    best, best_score, stale = params, -np.inf, 0
    history = []
    n = len(X)
    for _ in range(cfg.epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            b = perm[s : s + cfg.batch_size]
            value, grads, _ = backprop(
                params, specs, X[b], CrossEntropy(T[b]), training=True, rng=drop
            )
            params, state = adam_step(state, params, grads)
            total += value * len(b)
        history.append(total / n)
        if X_val is not None:
            pred = forward_cache(params, specs, X_val).output.argmax(axis=1)
            score = macro_f1(T_val.argmax(axis=1), pred, k)
            if score > best_score:
                best, best_score, stale = params, score, 0
            else:
                stale += 1
                if stale >= cfg.early_stop.patience:
                    break
    if X_val is not None:
        params = best
    clf = Classifier(list(specs), params, n_train=len(X) + (0 if X_val is None else len(X_val)))
    clf.history = history
    clf.train_accuracy = float(np.mean(clf.predict(X) == T.argmax(axis=1)))
    return clf


def train_classifier(ds: Dataset, cfg: TrainConfig) -> Classifier:
    if len(ds.classes()) < 2:
        raise ValueError("training needs at least two classes")
    specs = classifier_specs(ds.d, ds.k, cfg.hidden, cfg.dropout)
    return fit(specs, ds.X, ds.y, cfg)


def input_gradient(c: Classifier, x: np.ndarray, y) -> np.ndarray:
    """Gradient of the per-sample cross-entropy L(y, S(x)) with respect to x.

    ``x`` may be a batch; each row gets the gradient of its own loss term.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[1] != c.d:
        raise ShapeError(f"input width {x2.shape[1]} does not match {c.d}")
    y = np.broadcast_to(np.asarray(y), (x2.shape[0],))
    if np.any((y < 0) | (y >= c.k)):
        raise ValueError("label out of range")
    # backprop averages over the batch; scale back to per-sample gradients
    _, _, gx = backprop(c.params, c.specs, x2, CrossEntropy(y))
    gx = gx * x2.shape[0]
    return gx if np.ndim(x) == 2 else gx[0]


def output_gradient(c: Classifier, x: np.ndarray, j, logits: bool = False) -> np.ndarray:
    """Rowwise gradient of S_j(x) (or of logit j) with respect to x."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cache = forward_cache(c.params, c.specs, x2)
    g = np.zeros((x2.shape[0], c.k))
    g[np.arange(x2.shape[0]), np.broadcast_to(np.asarray(j), (x2.shape[0],))] = 1.0
    stop = len(c.specs) - 1 if logits else None
    _, gx = backward(c.params, c.specs, cache, g, stop=stop)
    return gx if np.ndim(x) == 2 else gx[0]


def jacobian(c: Classifier, x: np.ndarray) -> np.ndarray:
    """Logit Jacobian: (k, d) for a vector, (batch, k, d) for a batch."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[1] != c.d:
        raise ShapeError(f"input width {x2.shape[1]} does not match {c.d}")
    cache = forward_cache(c.params, c.specs, x2)
    rows = []
    for j in range(c.k):
        g = np.zeros((x2.shape[0], c.k))
        g[:, j] = 1.0
        rows.append(backward(c.params, c.specs, cache, g, stop=len(c.specs) - 1)[1])
    J = np.stack(rows, axis=1)
    return J if np.ndim(x) == 2 else J[0]


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a if a.ndim == 2 else a.reshape(len(a), -1)


@dataclass
class QueryTranscript:
    """Answered queries in order; ``truncation`` marks the first blocked query."""

    X: np.ndarray
    responses: np.ndarray
    truncation: int | None = None

    def __post_init__(self):
        self.X = _rows(self.X)
        self.responses = _rows(self.responses)
        if len(self.responses) != len(self.X):
            raise ValueError("one response per query is required")
        if self.truncation is not None and not 0 <= self.truncation <= len(self.X):
            raise ValueError("truncation index beyond transcript length")

    def __len__(self) -> int:
        return len(self.X)

    def answered(self) -> "QueryTranscript":
        n = len(self) if self.truncation is None else self.truncation
        return QueryTranscript(self.X[:n], self.responses[:n], self.truncation)


def substitute_config(attack_kind: str, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    family = ATTACK_FAMILY.get(attack_kind, attack_kind)
    epochs = SUBSTITUTE_EPOCHS[family]
    early = EarlyStop() if family == "npd" else base.early_stop
    return TrainConfig(
        epochs=epochs,
        batch_size=base.batch_size,
        lr=base.lr,
        early_stop=early,
        seed=base.seed,
        hidden=base.hidden,
        dropout=base.dropout,
    )


def train_substitute(
    t: QueryTranscript,
    attack_kind: str,
    cfg: TrainConfig | None = None,
    d: int | None = None,
    k: int | None = None,
) -> Classifier:
    """Train g~ on the answered prefix of ``t`` with soft-label cross-entropy.

    ``cfg=None`` uses the per-attack epoch defaults. An empty transcript yields
    a zero network flagged ``answered_nothing`` (chance-level accuracy).
    """
    cfg = cfg or substitute_config(attack_kind)
    t = t.answered()
    if len(t) == 0:
        if d is None or k is None:
            raise ValueError("d and k are needed to build a model from no queries")
        return zero_classifier(d, k, cfg.hidden)
    d, k = t.X.shape[1], t.responses.shape[1]
    specs = classifier_specs(d, k, cfg.hidden, cfg.dropout)
    return fit(specs, t.X, t.responses, cfg)
