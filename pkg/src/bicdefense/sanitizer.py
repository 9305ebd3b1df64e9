"""Greedy complete-data BIC minimization over per-class mixture components.

Every training sample is explained by exactly one live component, its
*explainer*.  Initially that is the best component of its own class.  Each
greedy step trial-evaluates, for every live component, removing it
(its samples move to their best other component anywhere) and revising it
(members whose best other component lies in another class move there; the
rest stay and the component is refit on them).  The single trial that lowers
the total cost the most is committed.  When nothing lowers it any more, every
sample whose explainer belongs to a class other than its label is deemed
poisoned and dropped.

Cost bookkeeping (natural log, ``k = 0.5 ln T`` with ``T`` the training-set
size)::

    BIC = sum_live k |Lambda| + n_components_initial - sum_i log P[x_i; explainer_i]

The per-component structural bit is carried as a constant; it never enters a
decision.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset
from .mixtures import ComponentParams, ModelSet, hard_assign, kind_for, log_density, mle_fit

KEEP, REVISE, REMOVE = "keep", "revise", "remove"
CASE_NUMBER = {KEEP: 1, REMOVE: 2, REVISE: 3}
# tie order among equal deltas
CASE_RANK = {KEEP: 0, REVISE: 1, REMOVE: 2}
DESCENT_EPS = 1e-9
# deltas closer than this fraction of the current BIC are ties (rounding noise)
TIE_RTOL = 1e-10


@dataclass
class TrialResult:
    target: Tuple[int, int]
    case: str
    delta_omega: float = 0.0
    delta_L: float = 0.0
    feasible: bool = True
    # sample row -> global slot of its new explainer
    proposed_reassignments: Dict[int, int] = field(default_factory=dict)
    # global slot -> refit parameters
    proposed_refits: Dict[int, ComponentParams] = field(default_factory=dict)

    @property
    def delta_bic(self) -> float:
        return float(self.delta_omega + self.delta_L) if self.feasible else np.inf


@dataclass
class TraceRow:
    step: int
    bic: float
    num_detected: int
    action: str
    target_class: Optional[int] = None
    target_component: Optional[int] = None
    case: Optional[int] = None
    delta_bic: float = 0.0
    accuracy: Optional[float] = None


class SanitizerState:
    """Mutable bookkeeping for one sanitization run.

    Components live in *slots* ``0..K-1`` ordered by (class, component).
    ``slot_class[s]`` and ``slot_index[s]`` give the owning class and its
    original 1-based component number, which stays fixed across removals.
    """

    def __init__(self, data: Dataset, model: ModelSet):
        if not model.covers(data.n_classes):
            raise ValueError("model must cover classes 1..W of the data")
        self.X = data.X
        self.labels = data.labels.copy()
        self.n_classes = data.n_classes
        self.T = data.T
        self.k = 0.5 * np.log(self.T)
        self.kind = kind_for(data.feature_kind)

        self.params: List[ComponentParams] = []
        self.slot_class: List[int] = []
        self.slot_index: List[int] = []
        for c in model.classes:
            for j, comp in enumerate(model.mixtures[c].components, start=1):
                if comp.kind != self.kind:
                    raise ValueError("component kind does not match feature kind")
                self.params.append(comp)
                self.slot_class.append(c)
                self.slot_index.append(j)
        K = len(self.params)
        self.slot_class = np.asarray(self.slot_class)
        self.slot_index = np.asarray(self.slot_index)
        self.n_free = np.array([p.free_param_count for p in self.params], dtype=float)
        self.alive = np.ones(K, dtype=bool)
        self.r = np.zeros(K, dtype=int)
        self.q = np.zeros(K, dtype=int)
        self.revise_count = np.zeros(K, dtype=int)

        # cached log densities, samples x slots; removed slots hold -inf
        self.logp = np.column_stack([log_density(p, self.X) for p in self.params])

        self.assign = np.empty(self.T, dtype=int)
        parts = hard_assign(model, data)
        for c in model.classes:
            base = self.slot_of(c, 1)
            for j, rows in enumerate(parts[c]):
                self.assign[rows] = base + j

        self.removed_components: List[Tuple[int, int]] = []
        self.bic_current = complete_bic(self)
        self.step = 0
        self.trace: List[TraceRow] = [
            TraceRow(0, self.bic_current, self.num_detected(), "init")]

    # -- lookups -----------------------------------------------------------
    @property
    def K(self) -> int:
        return len(self.params)

    def slot_of(self, c: int, j: int) -> int:
        hits = np.flatnonzero((self.slot_class == c) & (self.slot_index == j))
        if hits.size != 1:
            raise KeyError(f"no component ({c}, {j})")
        return int(hits[0])

    def key(self, slot: int) -> Tuple[int, int]:
        return int(self.slot_class[slot]), int(self.slot_index[slot])

    def live_slots(self) -> List[int]:
        return [int(s) for s in np.flatnonzero(self.alive)]

    def members(self, slot: int) -> np.ndarray:
        return np.flatnonzero(self.assign == slot)

    def t(self) -> np.ndarray:
        """Class of each sample's explainer."""
        return self.slot_class[self.assign]

    def detected(self) -> np.ndarray:
        return self.t() != self.labels

    def num_detected(self) -> int:
        return int(self.detected().sum())

    def partitions(self) -> Dict[Tuple[int, int], np.ndarray]:
        return {self.key(s): self.members(s) for s in self.live_slots()}

    def live_in_class(self, c: int) -> int:
        return int(np.sum(self.alive & (self.slot_class == c)))


def complete_bic(state: SanitizerState, recompute: bool = False) -> float:
    """Total complete-data BIC of ``state``.

    With ``recompute=True`` every log density is evaluated afresh from the
    component parameters instead of read from the cache.
    """
    live = state.alive
    omega = state.k * state.n_free[live].sum() + state.K
    if recompute:
        ll = 0.0
        for s in np.unique(state.assign):
            rows = state.assign == s
            ll += float(np.sum(log_density(state.params[s], state.X[rows])))
    else:
        ll = float(state.logp[np.arange(state.T), state.assign].sum())
    return float(omega - ll)


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

def _best_alternatives(state: SanitizerState, rows: np.ndarray, exclude: int) -> np.ndarray:
    """Best live slot other than ``exclude`` for each row (ties: lowest slot)."""
    scores = state.logp[rows].copy()
    scores[:, exclude] = -np.inf
    return np.argmax(scores, axis=1)


def _receiver_change(state, moving_rows, targets, refits) -> float:
    """Refit each receiving slot on its augmented membership.

    Fills ``refits`` and returns new-minus-old negative log-likelihood summed
    over the receivers' augmented member sets.
    """
    delta = 0.0
    for h in np.unique(targets):
        h = int(h)
        old_rows = state.members(h)
        new_rows = np.concatenate([old_rows, moving_rows[targets == h]])
        new_params = mle_fit(state.kind, state.X[new_rows])
        refits[h] = new_params
        delta -= float(log_density(new_params, state.X[new_rows]).sum())
        delta += float(state.logp[old_rows, h].sum())
    return delta


def trial_keep(state: SanitizerState, c: int, j: int) -> TrialResult:
    state.slot_of(c, j)
    return TrialResult((c, j), KEEP)


def trial_remove(state: SanitizerState, c: int, j: int) -> TrialResult:
    slot = state.slot_of(c, j)
    if not state.alive[slot]:
        raise ValueError(f"component ({c}, {j}) was removed")
    result = TrialResult((c, j), REMOVE)
    if state.live_in_class(c) < 2:
        result.feasible = False
        return result
    rows = state.members(slot)
    targets = _best_alternatives(state, rows, slot)
    refits: Dict[int, ComponentParams] = {}
    dL = _receiver_change(state, rows, targets, refits)
    dL += float(state.logp[rows, slot].sum())
    result.delta_omega = -state.n_free[slot] * state.k
    result.delta_L = dL
    result.proposed_reassignments = dict(zip(rows.tolist(), targets.tolist()))
    result.proposed_refits = refits
    return result


def trial_revise(state: SanitizerState, c: int, j: int) -> TrialResult:
    slot = state.slot_of(c, j)
    if not state.alive[slot]:
        raise ValueError(f"component ({c}, {j}) was removed")
    result = TrialResult((c, j), REVISE)
    rows = state.members(slot)
    best = _best_alternatives(state, rows, slot)
    stay = state.slot_class[best] == c
    survivors = rows[stay]
    if survivors.size == 0:
        result.feasible = False
        return result
    movers, targets = rows[~stay], best[~stay]
    refits: Dict[int, ComponentParams] = {}
    dL = _receiver_change(state, movers, targets, refits)
    revised = mle_fit(state.kind, state.X[survivors])
    refits[slot] = revised
    dL -= float(log_density(revised, state.X[survivors]).sum())
    dL += float(state.logp[rows, slot].sum())
    result.delta_L = dL
    result.proposed_reassignments = dict(zip(movers.tolist(), targets.tolist()))
    result.proposed_refits = refits
    return result


def evaluate_trials(state: SanitizerState, n_jobs: int = 1) -> List[TrialResult]:
    """Remove and revise trials for every live component, in slot order."""
    jobs = []
    for s in state.live_slots():
        c, j = state.key(s)
        jobs.append((trial_revise, c, j))
        jobs.append((trial_remove, c, j))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(lambda job: job[0](state, job[1], job[2]), jobs))
    return [fn(state, c, j) for fn, c, j in jobs]


def select_trial(trials: List[TrialResult], scale: float = 0.0) -> Optional[TrialResult]:
    """Deterministic argmin: delta, then class, component, case order.

    Deltas within ``TIE_RTOL * scale`` of the smallest one count as ties so
    that floating-point noise cannot override the tie order.
    """
    feasible = [t for t in trials if t.feasible]
    if not feasible:
        return None
    lowest = min(t.delta_bic for t in feasible)
    near = [t for t in feasible if t.delta_bic <= lowest + TIE_RTOL * scale]
    return min(near, key=lambda t: (t.target[0], t.target[1], CASE_RANK[t.case]))


def commit(state: SanitizerState, trial: TrialResult) -> TraceRow:
    """Apply ``trial`` to ``state`` and append a trace row."""
    c, j = trial.target
    slot = state.slot_of(c, j)
    for row, target in trial.proposed_reassignments.items():
        state.assign[row] = target
    for h, params in trial.proposed_refits.items():
        state.params[h] = params
        state.logp[:, h] = log_density(params, state.X)
    state.r[slot] = 1
    if trial.case == REMOVE:
        state.q[slot] = 0
        state.alive[slot] = False
        state.logp[:, slot] = -np.inf
        state.removed_components.append((c, j))
    else:
        state.q[slot] = 1
        state.revise_count[slot] += 1
    state.bic_current += trial.delta_bic
    state.step += 1
    row = TraceRow(state.step, state.bic_current, state.num_detected(), trial.case,
                   c, j, CASE_NUMBER[trial.case], trial.delta_bic)
    state.trace.append(row)
    return row


def greedy_step(state: SanitizerState, n_jobs: int = 1) -> Optional[TraceRow]:
    """Commit the single best trial, or return ``None`` at convergence."""
    best = select_trial(evaluate_trials(state, n_jobs), abs(state.bic_current))
    if best is None or best.delta_bic >= -DESCENT_EPS * abs(state.bic_current):
        return None
    return commit(state, best)


def hypothesis_test(state: SanitizerState) -> str:
    """``"clean"`` when no component was flagged and no sample changed class."""
    if np.any(state.r) or state.num_detected():
        return "poisoned"
    return "clean"


@dataclass
class SanitizeSummary:
    detected: np.ndarray
    removed_ids: List[int]
    verdict: str
    per_class: List[dict]
    trace: List[TraceRow]


def sanitize(data: Dataset, model: ModelSet, n_jobs: int = 1, max_steps: Optional[int] = None,
             step_callback: Optional[Callable[[SanitizerState], Optional[float]]] = None):
    """Run the greedy BIC minimization to convergence.

    ``step_callback`` is called after every committed step; a returned float
    is recorded as that step's accuracy in the trace.

    Returns ``(sanitized, summary, state)``.  ``sanitized`` keeps only samples
    whose explainer class equals their label; ``removed_ids`` are taken from
    ``data.ids``.
    """
    state = SanitizerState(data, model)
    while max_steps is None or state.step < max_steps:
        row = greedy_step(state, n_jobs)
        if row is None:
            break
        if step_callback is not None:
            row.accuracy = step_callback(state)
    detected = state.detected()
    sanitized = data if not detected.any() else data.subset(~detected)
    per_class = []
    for c in range(1, state.n_classes + 1):
        in_c = state.slot_class == c
        per_class.append({
            "class": c,
            "components": int(in_c.sum()),
            "revised": int(np.sum(in_c & state.alive & (state.r == 1) & (state.q == 1))),
            "removed": int(np.sum(in_c & ~state.alive)),
        })
    summary = SanitizeSummary(
        detected=detected,
        removed_ids=[int(i) for i in data.ids[detected]],
        verdict=hypothesis_test(state),
        per_class=per_class,
        trace=list(state.trace),
    )
    return sanitized, summary, state
