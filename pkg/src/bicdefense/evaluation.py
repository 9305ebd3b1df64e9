"""Linear victim classifiers and attack/defense metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.special import logsumexp

from .data import Dataset

LOGISTIC = "logistic"
HINGE = "hinge"

DEFAULT_HYPERPARAMS = {"l2": 1e-3, "steps": 500, "lr": 0.1}


@dataclass
class LinearModel:
    weights: np.ndarray  # (W, d)
    bias: np.ndarray  # (W,)
    kind: str = LOGISTIC
    loss_history: Optional[list] = None

    def scores(self, X) -> np.ndarray:
        return np.asarray(X, float) @ self.weights.T + self.bias

    def predict(self, X) -> np.ndarray:
        # argmax takes the first maximum, so ties go to the lowest class id
        return np.argmax(self.scores(X), axis=1) + 1


@dataclass
class Metrics:
    accuracy: Optional[float] = None
    tpr: Optional[float] = None
    fpr: Optional[float] = None


def _loss_grad(kind, Wt, b, X, Y, l2):
    """Objective and gradient; ``Y`` is the one-hot label matrix."""
    n = X.shape[0]
    S = X @ Wt.T + b
    if kind == LOGISTIC:
        lse = logsumexp(S, axis=1)
        loss = float(np.sum(lse - (S * Y).sum(axis=1))) / n
        G = (np.exp(S - lse[:, None]) - Y) / n
    elif kind == HINGE:
        sign = 2.0 * Y - 1.0
        margin = 1.0 - sign * S
        active = margin > 0
        loss = float(np.sum(margin[active])) / n
        G = -(sign * active) / n
    else:
        raise ValueError(f"unknown victim kind {kind!r}")
    loss += 0.5 * l2 * float(np.sum(Wt * Wt))
    return loss, G.T @ X + l2 * Wt, G.sum(axis=0)


def loss_and_gradient(model: LinearModel, X, labels, l2=DEFAULT_HYPERPARAMS["l2"]):
    """Regularized training objective of ``model`` and its gradient (dW, db)."""
    X = np.asarray(X, float)
    Y = np.eye(model.weights.shape[0])[np.asarray(labels) - 1]
    return _loss_grad(model.kind, model.weights, model.bias, X, Y, l2)


def train_linear(data: Dataset, kind=LOGISTIC, hyperparams=None, seed=0) -> LinearModel:
    """Full-batch gradient descent from zero weights.

    Multinomial cross-entropy (``logistic``) or one-vs-rest hinge
    (``hinge``), both with L2 on the weights.  A step that would raise the
    objective is retried with the learning rate halved; the halved rate is
    kept.  The procedure is deterministic, ``seed`` is accepted for
    interface symmetry only.
    """
    hp = dict(DEFAULT_HYPERPARAMS, **(hyperparams or {}))
    present = np.unique(data.labels)
    if present.size < 2:
        raise ValueError("victim training needs at least two classes")
    W = data.n_classes
    X = data.X
    Y = np.eye(W)[data.labels - 1]
    Wt = np.zeros((W, data.d))
    b = np.zeros(W)
    lr = hp["lr"]
    loss, gW, gb = _loss_grad(kind, Wt, b, X, Y, hp["l2"])
    history = [loss]
    for _ in range(int(hp["steps"])):
        while True:
            Wn, bn = Wt - lr * gW, b - lr * gb
            new_loss, nW, nb = _loss_grad(kind, Wn, bn, X, Y, hp["l2"])
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        if new_loss > loss:
            break
        Wt, b, loss, gW, gb = Wn, bn, new_loss, nW, nb
        history.append(loss)
    return LinearModel(Wt, b, kind, history)


def per_sample_gradients(model: LinearModel, X, labels) -> np.ndarray:
    """Unregularized loss gradient of each sample w.r.t. ``[W | b]``, flattened.

    Rows have length ``W * (d + 1)``.
    """
    X = np.asarray(X, float)
    n = X.shape[0]
    Y = np.eye(model.weights.shape[0])[np.asarray(labels) - 1]
    S = model.scores(X)
    if model.kind == LOGISTIC:
        G = np.exp(S - logsumexp(S, axis=1)[:, None]) - Y
    elif model.kind == HINGE:
        sign = 2.0 * Y - 1.0
        G = -sign * ((1.0 - sign * S) > 0)
    else:
        raise ValueError(f"unknown victim kind {model.kind!r}")
    Xa = np.hstack([X, np.ones((n, 1))])
    return (G[:, :, None] * Xa[:, None, :]).reshape(n, -1)


def test_accuracy(model: LinearModel, test: Dataset) -> float:
    """Fraction of test samples whose predicted class equals the label."""
    if test.T == 0:
        raise ValueError("empty test set")
    return float(np.mean(model.predict(test.X) == test.labels))


test_accuracy.__test__ = False  # not a pytest test despite the name


def detection_metrics(detected_ids: Iterable[int], truth) -> Metrics:
    """TPR and FPR of a detected set against boolean ground truth.

    ``detected_ids`` index into ``truth``.  TPR is ``None`` when nothing is
    poisoned; FPR is ``None`` when nothing is clean.
    """
    truth = np.asarray(truth, dtype=bool)
    flag = np.zeros(truth.shape, dtype=bool)
    ids = np.fromiter(detected_ids, dtype=int)
    flag[ids] = True
    n_pos = int(truth.sum())
    n_neg = int((~truth).sum())
    tpr = float(np.sum(flag & truth) / n_pos) if n_pos else None
    fpr = float(np.sum(flag & ~truth) / n_neg) if n_neg else None
    return Metrics(tpr=tpr, fpr=fpr)
