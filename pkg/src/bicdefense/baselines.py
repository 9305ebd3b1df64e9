"""Comparison defenses: KNN plurality relabeling and SVD gradient-outlier removal."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset
from .evaluation import LinearModel, per_sample_gradients


class UnsupportedModelError(TypeError):
    pass


@dataclass
class KnnConfig:
    K: int = 10
    distance: str = "euclidean"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass
class SvdConfig:
    epsilon: float = 0.1
    beta: int = 2

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.beta < 1:
            raise ValueError("beta must be a positive integer")

    def per_step(self, T: int) -> int:
        return math.ceil(self.epsilon * T / self.beta)


def _distances(X, metric):
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        U = X / np.where(norms > 0, norms, 1.0)
        return 1.0 - U @ U.T
    sq = (X * X).sum(axis=1)
    return np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)


def plurality(neighbor_labels, own_label):
    """Most frequent label; ties prefer ``own_label``, then the lowest id."""
    values, counts = np.unique(neighbor_labels, return_counts=True)
    top = values[counts == counts.max()]
    return int(own_label) if own_label in top else int(top.min())


def knn_defend(data: Dataset, cfg: KnnConfig = KnnConfig()) -> Dataset:
    """Relabel every sample to the plurality label of its K nearest neighbours.

    Neighbours are found among the other samples (self excluded) and all
    votes use the original labels.  Features and sample count are unchanged.
    """
    if data.T <= cfg.K:
        raise ValueError(f"need more than K={cfg.K} samples, got {data.T}")
    D = _distances(data.X, cfg.distance)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :cfg.K]
    new = np.array([plurality(data.labels[nn[i]], data.labels[i]) for i in range(data.T)])
    return data.with_labels(new)


def top_singular_vector(G: np.ndarray) -> np.ndarray:
    """Unit top right singular vector of ``G`` via the smaller Gram matrix."""
    n, p = G.shape
    if p <= n:
        vals, vecs = np.linalg.eigh(G.T @ G)
        v = vecs[:, -1]
    else:
        vals, vecs = np.linalg.eigh(G @ G.T)
        v = G.T @ vecs[:, -1]
    norm = np.linalg.norm(v)
    if norm == 0:
        return np.zeros(p)
    v = v / norm
    # fix the sign so results do not depend on the eigensolver
    lead = np.flatnonzero(np.abs(v) > 1e-12)
    if lead.size and v[lead[0]] < 0:
        v = -v
    return v


def gradient_scores(model: LinearModel, data: Dataset) -> np.ndarray:
    """Squared projection of each centred per-class gradient on its top direction."""
    G = per_sample_gradients(model, data.X, data.labels)
    scores = np.zeros(data.T)
    for c in np.unique(data.labels):
        rows = np.flatnonzero(data.labels == c)
        Gc = G[rows] - G[rows].mean(axis=0)
        v = top_singular_vector(Gc)
        scores[rows] = (Gc @ v) ** 2
    return scores


def svd_defend(data: Dataset, victim_trainer: Callable[[Dataset], LinearModel],
               cfg: SvdConfig = SvdConfig()) -> Dataset:
    """Remove the highest gradient-outlier scores in ``beta`` retraining rounds.

    Each round retrains the victim, scores samples per class and drops the
    ``ceil(epsilon * T / beta)`` highest scores across all classes.
    """
    per_step = cfg.per_step(data.T)
    current = data
    for _ in range(cfg.beta):
        if per_step == 0:
            break
        model = victim_trainer(current)
        if not isinstance(model, LinearModel):
            raise UnsupportedModelError("SVD defense supports linear victims only")
        scores = gradient_scores(model, current)
        order = np.argsort(-scores, kind="stable")
        keep = np.ones(current.T, bool)
        keep[order[:per_step]] = False
        current = current.subset(keep)
    return current
