"""Datasets, feature preprocessing and the two on-disk formats.

Two text formats are supported:

* dense CSV: a header row with one ``label`` column (integers ``1..W``) and
  real-valued feature columns; an optional ``poison`` column (0/1) carries
  ground truth.
* sparse counts: one sample per line, ``label index:count index:count ...``
  with 1-based ascending indices.  An optional first line
  ``# n_features=<d>`` pins the vocabulary size.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

CONTINUOUS = "continuous"
COUNT = "count"
FEATURE_KINDS = (CONTINUOUS, COUNT)


class DataFormatError(ValueError):
    """Raised for malformed dataset files or invalid in-memory datasets."""


@dataclass
class Dataset:
    """Labeled training or test samples.

    ``X`` is always stored densely as a ``(T, d)`` float array; count data
    holds non-negative integer values.  ``labels`` are class ids in
    ``1..n_classes``.  ``ids`` track the row index in the dataset this one
    was derived from, so subsets can be mapped back to their origin.
    """

    X: np.ndarray
    labels: np.ndarray
    feature_kind: str = CONTINUOUS
    n_classes: Optional[int] = None
    poison_truth: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.X.ndim != 2:
            raise DataFormatError("features must be a 2-d array")
        if self.feature_kind not in FEATURE_KINDS:
            raise DataFormatError(f"unknown feature kind {self.feature_kind!r}")
        T = self.X.shape[0]
        if T == 0:
            raise DataFormatError("dataset is empty")
        if self.labels.shape != (T,):
            raise DataFormatError("labels and samples differ in length")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max())
        if self.labels.min() < 1 or self.labels.max() > self.n_classes:
            raise DataFormatError(f"labels must lie in 1..{self.n_classes}")
        if self.poison_truth is not None:
            self.poison_truth = np.asarray(self.poison_truth, dtype=bool)
            if self.poison_truth.shape != (T,):
                raise DataFormatError("poison_truth and samples differ in length")
        if self.ids is None:
            self.ids = np.arange(T)
        else:
            self.ids = np.asarray(self.ids, dtype=int)
        if self.feature_kind == COUNT:
            if np.any(self.X < 0):
                raise DataFormatError("count features must be non-negative")
            if np.any(self.X.sum(axis=1) <= 0):
                raise DataFormatError("count samples need at least one positive entry")

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def class_counts(self) -> np.ndarray:
        """Number of samples per class, index 0 holding class 1."""
        return np.bincount(self.labels, minlength=self.n_classes + 1)[1:]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Dataset(
            X=self.X[index],
            labels=self.labels[index],
            feature_kind=self.feature_kind,
            n_classes=self.n_classes,
            poison_truth=None if self.poison_truth is None else self.poison_truth[index],
            ids=self.ids[index],
        )

    def with_labels(self, labels) -> "Dataset":
        return Dataset(self.X, np.asarray(labels), self.feature_kind, self.n_classes,
                       self.poison_truth, self.ids)

    def with_features(self, X, feature_kind=None) -> "Dataset":
        return Dataset(X, self.labels, feature_kind or self.feature_kind, self.n_classes,
                       self.poison_truth, self.ids)

    def class_subset(self, c: int) -> "Dataset":
        return self.subset(self.labels == c)

    def same_content(self, other: "Dataset") -> bool:
        """Equality of features, labels and kind (ignores ids and truth)."""
        return (
            self.feature_kind == other.feature_kind
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
        )


def concatenate(parts, n_classes=None) -> Dataset:
    """Stack datasets of the same kind; ids are renumbered from zero."""
    parts = list(parts)
    kinds = {p.feature_kind for p in parts}
    if len(kinds) != 1:
        raise DataFormatError("cannot mix dense and count datasets")
    truth = None
    if any(p.poison_truth is not None for p in parts):
        truth = np.concatenate([
            p.poison_truth if p.poison_truth is not None else np.zeros(p.T, bool)
            for p in parts
        ])
    return Dataset(
        X=np.vstack([p.X for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        feature_kind=kinds.pop(),
        n_classes=n_classes or max(p.n_classes for p in parts),
        poison_truth=truth,
    )


class Scaler:
    """Scale each feature to [0, 1] over a reference set, then center.

    The constants are learned once with :meth:`fit` and reused for every
    other set (test data, pools) so all inputs share one coordinate frame.
    """

    def __init__(self):
        self.low = None
        self.span = None
        self.mean = None

    def fit(self, X):
        X = np.asarray(X, dtype=float)
        self.low = X.min(axis=0)
        span = X.max(axis=0) - self.low
        # constant columns map to zero rather than dividing by zero
        self.span = np.where(span > 0, span, 1.0)
        self.mean = ((X - self.low) / self.span).mean(axis=0)
        return self

    def transform(self, X):
        if self.low is None:
            raise RuntimeError("Scaler used before fit")
        return (np.asarray(X, dtype=float) - self.low) / self.span - self.mean

    def fit_transform(self, X):
        return self.fit(X).transform(X)

    def to_dict(self):
        return {"low": self.low.tolist(), "span": self.span.tolist(), "mean": self.mean.tolist()}

    @classmethod
    def from_dict(cls, payload):
        s = cls()
        s.low = np.asarray(payload["low"], float)
        s.span = np.asarray(payload["span"], float)
        s.mean = np.asarray(payload["mean"], float)
        return s


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _check_labels(labels, n_classes, line_numbers, path):
    top = n_classes if n_classes is not None else max(labels)
    for lab, ln in zip(labels, line_numbers):
        if lab < 1 or lab > top:
            raise DataFormatError(f"{path}:{ln}: label {lab} outside 1..{top}")
    return top


def load_csv(path, n_classes=None) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path}:1: empty file") from None
        if header.count("label") != 1:
            raise DataFormatError(f"{path}:1: header needs exactly one 'label' column")
        label_col = header.index("label")
        poison_col = header.index("poison") if "poison" in header else None
        feat_cols = [i for i, h in enumerate(header) if i not in (label_col, poison_col)]
        rows, labels, truth, lines = [], [], [], []
        for ln, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"{path}:{ln}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append(int(row[label_col]))
                rows.append([float(row[i]) for i in feat_cols])
                if poison_col is not None:
                    truth.append(bool(int(row[poison_col])))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: {exc}") from None
            lines.append(ln)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    W = _check_labels(labels, n_classes, lines, path)
    X = np.asarray(rows, dtype=float)
    if not np.all(np.isfinite(X)):
        bad = lines[int(np.flatnonzero(~np.isfinite(X).all(axis=1))[0])]
        raise DataFormatError(f"{path}:{bad}: non-finite feature value")
    return Dataset(X, np.asarray(labels), CONTINUOUS, W,
                   np.asarray(truth) if poison_col is not None else None)


def parse_sparse_line(line: str):
    """Parse ``label i:c i:c ...`` into ``(label, {index: count})``."""
    parts = line.split()
    label = int(parts[0])
    entries = {}
    prev = 0
    for tok in parts[1:]:
        idx_s, sep, cnt_s = tok.partition(":")
        if not sep:
            raise ValueError(f"malformed entry {tok!r}")
        idx, cnt = int(idx_s), float(cnt_s)
        if idx in entries:
            raise ValueError(f"duplicate index {idx}")
        if idx < 1:
            raise ValueError(f"index {idx} is not 1-based")
        if idx < prev:
            raise ValueError(f"indices not ascending at {idx}")
        if cnt < 0 or cnt != int(cnt):
            raise ValueError(f"count {cnt_s} is not a non-negative integer")
        entries[idx] = int(cnt)
        prev = idx
    return label, entries


def load_sparse(path, n_features=None, n_classes=None) -> Dataset:
    path = Path(path)
    labels, docs, lines = [], [], []
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "n_features" and n_features is None:
                    n_features = int(value)
                continue
            try:
                label, entries = parse_sparse_line(line)
            except ValueError as exc:
                raise DataFormatError(f"{path}:{ln}: {exc}") from None
            if not any(v > 0 for v in entries.values()):
                raise DataFormatError(f"{path}:{ln}: empty document")
            labels.append(label)
            docs.append(entries)
            lines.append(ln)
    if not docs:
        raise DataFormatError(f"{path}: no samples")
    W = _check_labels(labels, n_classes, lines, path)
    d = max(max(e) for e in docs)
    if n_features is not None:
        if d > n_features:
            raise DataFormatError(f"{path}: index {d} exceeds n_features={n_features}")
        d = n_features
    X = np.zeros((len(docs), d))
    for i, entries in enumerate(docs):
        for idx, cnt in entries.items():
            X[i, idx - 1] = cnt
    return Dataset(X, np.asarray(labels), COUNT, W)


def load_dataset(path, format=None, n_classes=None) -> Dataset:
    """Load a dataset from ``path``.

    ``format`` is ``"csv"`` or ``"sparse"``; when omitted it is inferred from
    the file extension (``.csv`` means dense, anything else sparse).
    """
    fmt = format or ("csv" if str(path).endswith(".csv") else "sparse")
    if fmt == "csv":
        return load_csv(path, n_classes=n_classes)
    if fmt == "sparse":
        return load_sparse(path, n_classes=n_classes)
    raise DataFormatError(f"unknown dataset format {fmt!r}")


def dumps_dataset(data: Dataset, format=None, include_truth=False) -> str:
    fmt = format or ("csv" if data.feature_kind == CONTINUOUS else "sparse")
    buf = io.StringIO()
    if fmt == "csv":
        writer = csv.writer(buf, lineterminator="\n")
        header = ["label"] + [f"x{l + 1}" for l in range(data.d)]
        with_truth = include_truth and data.poison_truth is not None
        if with_truth:
            header.append("poison")
        writer.writerow(header)
        for i in range(data.T):
            row = [int(data.labels[i])] + [repr(float(v)) for v in data.X[i]]
            if with_truth:
                row.append(int(data.poison_truth[i]))
            writer.writerow(row)
    elif fmt == "sparse":
        if data.feature_kind != COUNT:
            raise DataFormatError("sparse format holds count data only")
        buf.write(f"# n_features={data.d}\n")
        for i in range(data.T):
            nz = np.flatnonzero(data.X[i])
            toks = [str(int(data.labels[i]))] + [f"{j + 1}:{int(data.X[i, j])}" for j in nz]
            buf.write(" ".join(toks) + "\n")
    else:
        raise DataFormatError(f"unknown dataset format {fmt!r}")
    return buf.getvalue()


def save_dataset(data: Dataset, path, format=None, include_truth=False):
    Path(path).write_text(dumps_dataset(data, format, include_truth))
