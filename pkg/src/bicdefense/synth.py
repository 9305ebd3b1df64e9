"""Synthetic labeled datasets for experiments and acceptance runs."""

from __future__ import annotations

import numpy as np

from .data import CONTINUOUS, COUNT, Dataset


def class_means(n_classes: int, d: int, separation: float) -> np.ndarray:
    """Class centres with every pairwise distance equal to ``separation``.

    Needs ``n_classes <= d + 1``; two classes sit on the first axis.
    """
    if n_classes > d + 1:
        raise ValueError("equidistant means need n_classes <= d + 1")
    if n_classes == 2:
        means = np.zeros((2, d))
        means[1, 0] = separation
        return means
    means = np.zeros((n_classes, d))
    for c in range(1, n_classes):
        means[c, c - 1] = separation / np.sqrt(2.0)
    return means


def gaussian_blobs(n_per_class=500, n_classes=2, d=5, separation=4.0, scale=1.0,
                   subclusters=1, spread=0.0, seed=0) -> Dataset:
    """Each class is a mixture of ``subclusters`` isotropic Gaussians.

    Sub-cluster centres are displaced from the class mean by Gaussian noise
    of standard deviation ``spread``.
    """
    rng = np.random.default_rng(seed)
    means = class_means(n_classes, d, separation)
    X, y = [], []
    for c in range(n_classes):
        centres = means[c] + spread * rng.standard_normal((subclusters, d))
        which = rng.integers(subclusters, size=n_per_class)
        X.append(centres[which] + scale * rng.standard_normal((n_per_class, d)))
        y.append(np.full(n_per_class, c + 1))
    return Dataset(np.vstack(X), np.concatenate(y), CONTINUOUS, n_classes)


def topic_documents(n_per_class=300, n_classes=3, vocab=200, doc_length=60, overlap=0.5,
                    concentration=0.5, subtopics=1, subtopic_spread=0.5, seed=0) -> Dataset:
    """Bag-of-words documents drawn from per-class topic mixtures.

    Every class owns ``subtopics`` word distributions.  Each is built from a
    class profile blended with its own Dirichlet draw (weight
    ``subtopic_spread``), then mixed with a background draw shared by all
    classes (weight ``overlap``).  A document picks one sub-topic uniformly
    and has length ``1 + Poisson(doc_length - 1)``.
    """
    rng = np.random.default_rng(seed)
    background = rng.dirichlet(np.full(vocab, 1.0))
    X, y = [], []
    for c in range(n_classes):
        profile = rng.dirichlet(np.full(vocab, concentration))
        topics = []
        for _ in range(subtopics):
            own = rng.dirichlet(np.full(vocab, concentration))
            specific = (1 - subtopic_spread) * profile + subtopic_spread * own
            topics.append((1 - overlap) * specific + overlap * background)
        which = rng.integers(subtopics, size=n_per_class)
        lengths = 1 + rng.poisson(doc_length - 1, size=n_per_class)
        X.append(np.vstack([rng.multinomial(n, topics[t]) for n, t in zip(lengths, which)]))
        y.append(np.full(n_per_class, c + 1))
    return Dataset(np.vstack(X).astype(float), np.concatenate(y), COUNT, n_classes)
