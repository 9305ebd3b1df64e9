"""Per-class mixture models: component densities, MLE, EM and order selection.

Two component families are supported:

``gaussian_diag``
    Diagonal-covariance Gaussian, ``2d`` free parameters.  Variances are
    floored at :data:`VARIANCE_FLOOR` after every estimate.
``multinomial``
    Multinomial over a ``d``-word vocabulary, ``d - 1`` free parameters.
    Estimates use additive smoothing of :data:`SMOOTHING` pseudo-counts per
    word.  The multinomial coefficient ``log n! / prod x_l!`` is dropped from
    every log density; it is constant per sample, so it cancels in all
    comparisons made here.

All logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .data import CONTINUOUS, COUNT, Dataset

GAUSSIAN = "gaussian_diag"
MULTINOMIAL = "multinomial"

VARIANCE_FLOOR = 1e-6
SMOOTHING = 1.0
EM_TOL = 1e-6
EM_MAX_ITER = 200
EM_RESTARTS = 3
M_MAX_DEFAULT = 25

_LOG_2PI = np.log(2.0 * np.pi)


def kind_for(feature_kind: str) -> str:
    """Component family used for a dataset feature kind."""
    return {CONTINUOUS: GAUSSIAN, COUNT: MULTINOMIAL}[feature_kind]


@dataclass
class ComponentParams:
    kind: str
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    log_prob: Optional[np.ndarray] = None

    @property
    def d(self) -> int:
        return len(self.mean) if self.kind == GAUSSIAN else len(self.log_prob)

    @property
    def free_param_count(self) -> int:
        return 2 * self.d if self.kind == GAUSSIAN else self.d - 1

    def to_dict(self):
        if self.kind == GAUSSIAN:
            return {"kind": self.kind, "mean": self.mean.tolist(), "var": self.var.tolist()}
        return {"kind": self.kind, "log_prob": self.log_prob.tolist()}

    @classmethod
    def from_dict(cls, payload):
        if payload["kind"] == GAUSSIAN:
            return cls(GAUSSIAN, mean=np.asarray(payload["mean"], float),
                       var=np.asarray(payload["var"], float))
        return cls(MULTINOMIAL, log_prob=np.asarray(payload["log_prob"], float))


@dataclass
class ClassMixture:
    class_id: int
    components: List[ComponentParams]
    weights: np.ndarray
    # objective value after each EM iteration of the winning restart
    history: List[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.components) != len(self.weights) or not self.components:
            raise ValueError("mixture needs one weight per component and at least one component")

    @property
    def M(self) -> int:
        return len(self.components)

    def to_dict(self):
        return {"class_id": self.class_id, "weights": self.weights.tolist(),
                "components": [c.to_dict() for c in self.components]}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["class_id"],
                   [ComponentParams.from_dict(c) for c in payload["components"]],
                   payload["weights"])


@dataclass
class ModelSet:
    mixtures: Dict[int, ClassMixture]

    @property
    def classes(self):
        return sorted(self.mixtures)

    def covers(self, n_classes: int) -> bool:
        return self.classes == list(range(1, n_classes + 1))

    def to_dict(self):
        return {"mixtures": [self.mixtures[c].to_dict() for c in self.classes]}

    @classmethod
    def from_dict(cls, payload):
        mixes = [ClassMixture.from_dict(m) for m in payload["mixtures"]]
        return cls({m.class_id: m for m in mixes})


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _as_2d(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _check(params: ComponentParams, X):
    if params.kind not in (GAUSSIAN, MULTINOMIAL):
        raise ValueError(f"unknown component kind {params.kind!r}")
    if X.shape[1] != params.d:
        raise ValueError(f"dimension mismatch: sample has {X.shape[1]}, component has {params.d}")
    if params.kind == MULTINOMIAL and (np.any(X < 0) or np.any(X != np.floor(X))):
        raise ValueError("multinomial component needs non-negative integer counts")


def log_density(params: ComponentParams, x) -> float | np.ndarray:
    """log P[x; params] for one sample (1-d ``x``) or each row of a 2-d array."""
    X, single = _as_2d(x)
    _check(params, X)
    if params.kind == GAUSSIAN:
        z = (X - params.mean) ** 2 / params.var
        out = -0.5 * (z.sum(axis=1) + np.sum(np.log(params.var)) + params.d * _LOG_2PI)
    elif params.kind == MULTINOMIAL:
        out = X @ params.log_prob
    else:
        raise ValueError(f"unknown component kind {params.kind!r}")
    return float(out[0]) if single else out


def log_density_matrix(components: Sequence[ComponentParams], X) -> np.ndarray:
    """``(n, M)`` matrix of per-component log densities."""
    X = np.asarray(X, dtype=float)
    if not components:
        return np.empty((X.shape[0], 0))
    return np.column_stack([log_density(c, X) for c in components])


def mle_fit(kind: str, X, weights=None) -> ComponentParams:
    """Closed-form (smoothed / floored) maximum-likelihood estimate.

    ``weights`` turns this into the weighted estimate used by the EM M-step.
    """
    X, _ = _as_2d(X)
    if X.shape[0] == 0:
        raise ValueError("mle_fit needs at least one sample")
    w = np.ones(X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if kind == GAUSSIAN:
        total = w.sum()
        mean = (w @ X) / total
        var = (w @ (X - mean) ** 2) / total
        return ComponentParams(GAUSSIAN, mean=mean, var=np.maximum(var, VARIANCE_FLOOR))
    if kind == MULTINOMIAL:
        if np.any(X < 0):
            raise ValueError("multinomial component needs non-negative counts")
        counts = w @ X + SMOOTHING
        return ComponentParams(MULTINOMIAL, log_prob=np.log(counts) - np.log(counts.sum()))
    raise ValueError(f"unknown component kind {kind!r}")


def mixture_log_likelihood(mix: ClassMixture, X) -> float:
    """Incomplete-data log-likelihood sum_i log sum_j alpha_j P[x_i; j]."""
    with np.errstate(divide="ignore"):
        logw = np.log(mix.weights)
    return float(logsumexp(log_density_matrix(mix.components, X) + logw, axis=1).sum())


def free_param_count(mix: ClassMixture) -> int:
    return sum(c.free_param_count for c in mix.components) + mix.M - 1


def incomplete_bic(mix: ClassMixture, X) -> float:
    """|theta| * 0.5 ln T - L, with T the number of rows of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("incomplete_bic needs data")
    k = 0.5 * np.log(X.shape[0])
    return free_param_count(mix) * k - mixture_log_likelihood(mix, X)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def _log_prior(components, kind) -> float:
    # Dirichlet(1 + SMOOTHING) log prior (up to a constant): what smoothed
    # EM actually ascends for multinomials.
    if kind != MULTINOMIAL:
        return 0.0
    return SMOOTHING * float(sum(c.log_prob.sum() for c in components))


def _seed_profiles(X, kind):
    if kind == MULTINOMIAL:
        return X / X.sum(axis=1, keepdims=True)
    return X


def _kmeanspp_init(X, M, kind, rng) -> List[ComponentParams]:
    """k-means++ seeding, then one hard nearest-seed pass and per-cluster MLE."""
    P = _seed_profiles(X, kind)
    n = P.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((P - P[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, M):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining points coincide with a seed
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((P - P[nxt]) ** 2).sum(axis=1))
    centers = P[chosen]
    dist = ((P[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(dist, axis=1)
    nearest[chosen] = np.arange(M)
    pooled_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR) if kind == GAUSSIAN else None
    comps = []
    for m in range(M):
        members = X[nearest == m]
        comp = mle_fit(kind, members)
        if kind == GAUSSIAN and members.shape[0] < 2:
            comp.var = pooled_var.copy()
        comps.append(comp)
    return comps


def _stack(comps, kind):
    if kind == GAUSSIAN:
        return np.array([c.mean for c in comps]), np.array([c.var for c in comps])
    return np.array([c.log_prob for c in comps]), None


def _stacked_logp(X, kind, a, b, X2=None):
    if kind == GAUSSIAN:
        # expanded quadratic form: matrix products instead of an n x M x d array
        inv = 1.0 / b
        X2 = X * X if X2 is None else X2
        z = X2 @ inv.T - 2.0 * X @ (a * inv).T + (a * a * inv).sum(axis=1)
        return -0.5 * (z + np.log(b).sum(axis=1) + X.shape[1] * _LOG_2PI)
    return X @ a.T


def _logsumexp_rows(A):
    top = A.max(axis=1)
    top = np.where(np.isfinite(top), top, 0.0)
    return top + np.log(np.exp(A - top[:, None]).sum(axis=1))


def _em_run(X, comps, kind, tol, max_iter):
    """EM from the given starting components on stacked parameter arrays.

    The M-step mirrors :func:`mle_fit` with responsibilities as weights.
    """
    n = X.shape[0]
    M = len(comps)
    a, b = _stack(comps, kind)
    weights = np.full(M, 1.0 / M)
    X2 = X * X if kind == GAUSSIAN else None

    def objective():
        with np.errstate(divide="ignore"):
            joint = _stacked_logp(X, kind, a, b, X2) + np.log(weights)
        norm = _logsumexp_rows(joint)
        prior = SMOOTHING * float(a.sum()) if kind == MULTINOMIAL else 0.0
        return joint, norm, float(norm.sum()) + prior

    history = []
    prev = None
    for _ in range(max_iter):
        joint, norm, obj = objective()
        history.append(obj)
        if prev is not None and abs(obj - prev) <= tol * abs(prev):
            break
        prev = obj
        resp = np.exp(joint - norm[:, None])
        Nk = resp.sum(axis=0)
        weights = Nk / n
        # a starved component keeps its parameters
        ok = Nk > 1e-10
        if kind == GAUSSIAN:
            mean = (resp.T @ X)[ok] / Nk[ok, None]
            second = (resp.T @ X2)[ok] / Nk[ok, None]
            a[ok] = mean
            b[ok] = np.maximum(second - mean * mean, VARIANCE_FLOOR)
        else:
            counts = (resp.T @ X)[ok] + SMOOTHING
            a[ok] = np.log(counts) - np.log(counts.sum(axis=1, keepdims=True))
    else:
        history.append(objective()[2])
    if kind == GAUSSIAN:
        comps = [ComponentParams(GAUSSIAN, mean=a[m].copy(), var=b[m].copy()) for m in range(M)]
    else:
        comps = [ComponentParams(MULTINOMIAL, log_prob=a[m].copy()) for m in range(M)]
    return comps, weights, history


def em_fit(data, M: int, seed=0, *, kind=None, restarts=EM_RESTARTS, tol=EM_TOL,
           max_iter=EM_MAX_ITER, class_id=None) -> ClassMixture:
    """Fit an ``M``-component mixture to one class's samples by EM.

    ``data`` is either a :class:`Dataset` restricted to one class or a bare
    feature array (then ``kind`` must be given).  The best of ``restarts``
    k-means++-seeded runs by final objective is returned.  ``history`` on the
    result records the objective per iteration; for Gaussians this is the
    incomplete-data log-likelihood, for multinomials the log-likelihood plus
    the smoothing prior that the M-step maximizes.
    """
    if isinstance(data, Dataset):
        X = data.X
        kind = kind or kind_for(data.feature_kind)
        if class_id is None:
            labels = np.unique(data.labels)
            class_id = int(labels[0]) if len(labels) == 1 else 0
    else:
        X = np.asarray(data, dtype=float)
        if kind is None:
            raise ValueError("kind is required for bare arrays")
    n = X.shape[0]
    if n == 0:
        raise ValueError("em_fit needs a nonempty class")
    if M < 1 or M > n:
        raise ValueError(f"M={M} must lie in 1..{n} (class size)")
    class_id = 0 if class_id is None else class_id
    if M == 1:
        comp = mle_fit(kind, X)
        hist = [float(log_density(comp, X).sum()) + _log_prior([comp], kind)]
        return ClassMixture(class_id, [comp], np.ones(1), hist)

    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(restarts)]
    best = None
    for rng in rngs:
        comps, weights, hist = _em_run(X, _kmeanspp_init(X, M, kind, rng), kind, tol, max_iter)
        if best is None or hist[-1] > best[2][-1]:
            best = (comps, weights, hist)
    comps, weights, hist = best
    return ClassMixture(class_id, comps, weights / weights.sum(), hist)


# ---------------------------------------------------------------------------
# model order
# ---------------------------------------------------------------------------

def _order_seed(seed, M):
    return int(np.random.SeedSequence([seed, M]).generate_state(1)[0])


def bic_sweep(data, orders, seed=0, kind=None, **em_kw):
    """Fit each order in ``orders``; returns ``{M: (bic, mixture)}``."""
    X = data.X if isinstance(data, Dataset) else np.asarray(data, float)
    out = {}
    for M in orders:
        mix = em_fit(data, M, _order_seed(seed, M), kind=kind, **em_kw)
        out[M] = (incomplete_bic(mix, X), mix)
    return out


def select_order(data, M_max_initial=M_MAX_DEFAULT, seed=0, kind=None, return_sweep=False,
                 **em_kw):
    """Pick the BIC-minimizing order over ``1..M_max``.

    When the minimum sits at the upper bound, the bound is doubled (capped at
    the class size) and the sweep extended until the winner is interior.  Ties
    go to the smaller order.
    """
    n = data.T if isinstance(data, Dataset) else np.asarray(data).shape[0]
    if n == 0:
        raise ValueError("select_order needs a nonempty class")
    M_max = max(1, min(M_max_initial, n))
    sweep = bic_sweep(data, range(1, M_max + 1), seed, kind, **em_kw)
    while True:
        best = min(sweep, key=lambda M: (sweep[M][0], M))
        if best < M_max or M_max >= n:
            break
        new_max = min(2 * M_max, n)
        sweep.update(bic_sweep(data, range(M_max + 1, new_max + 1), seed, kind, **em_kw))
        M_max = new_max
    mix = sweep[best][1]
    return (mix, sweep) if return_sweep else mix


def fit_models(data: Dataset, M_max_initial=M_MAX_DEFAULT, seed=0, orders=None,
               **em_kw) -> ModelSet:
    """Fit one mixture per class, choosing each order by BIC.

    ``orders`` optionally fixes ``M`` per class (``{class_id: M}``) and skips
    the order sweep for those classes.
    """
    mixtures = {}
    for c in range(1, data.n_classes + 1):
        sub = data.class_subset(c) if np.any(data.labels == c) else None
        if sub is None:
            raise ValueError(f"class {c} has no samples")
        class_seed = int(np.random.SeedSequence([seed, c]).generate_state(1)[0])
        if orders and c in orders:
            mix = em_fit(sub, orders[c], class_seed, class_id=c, **em_kw)
        else:
            mix = select_order(sub, M_max_initial, class_seed, **em_kw)
        mix.class_id = c
        mixtures[c] = mix
    return ModelSet(mixtures)


def hard_assign(model: ModelSet, data: Dataset) -> Dict[int, List[np.ndarray]]:
    """Partition each class's samples by their best component in that class.

    Returns ``{c: [idx_1, ..., idx_M]}`` with row indices into ``data``; ties
    go to the lowest component index.
    """
    parts = {}
    for c in sorted(set(int(v) for v in np.unique(data.labels))):
        if c not in model.mixtures:
            raise ValueError(f"model has no mixture for class {c}")
    for c in model.classes:
        rows = np.flatnonzero(data.labels == c)
        mix = model.mixtures[c]
        if rows.size:
            best = np.argmax(log_density_matrix(mix.components, data.X[rows]), axis=1)
        else:
            best = np.empty(0, int)
        parts[c] = [rows[best == j] for j in range(mix.M)]
    return parts
