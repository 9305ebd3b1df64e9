"""Embedded label-flipping poisoning: real donor-class samples relabeled into victim classes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import Dataset, concatenate


class AttackError(ValueError):
    pass


@dataclass
class AttackSpec:
    injections: List[Tuple[int, int, int]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.injections = [tuple(int(v) for v in inj) for inj in self.injections]
        for donor, victim, count in self.injections:
            if donor == victim:
                raise AttackError(f"donor and victim class are both {donor}")
            if count < 0:
                raise AttackError(f"negative injection count {count}")

    @property
    def total(self) -> int:
        return sum(n for _, _, n in self.injections)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AttackSpec":
        """Parse ``"2>1:200, 3>1:50"`` (donor>victim:count, comma separated)."""
        injections = []
        for item in filter(None, (s.strip() for s in text.split(","))):
            try:
                pair, count = item.split(":")
                donor, victim = pair.split(">")
                injections.append((int(donor), int(victim), int(count)))
            except ValueError:
                raise AttackError(f"bad injection {item!r}; expected donor>victim:count") from None
        return cls(injections, seed)


@dataclass
class PoisonedDataset:
    dataset: Dataset
    truth: np.ndarray
    # row in ``dataset`` -> (original class, assigned class)
    provenance: Dict[int, Tuple[int, int]]


def split_pools(full: Dataset, fractions: Sequence[float], seed: int = 0):
    """Stratified split into train, test and per-class poisoning pools.

    ``fractions`` is ``(train, test, pool)``; each class contributes
    ``floor(f * n_c)`` samples to each part.  Returns ``(train, test, pools)``
    with ``pools`` mapping class id to a :class:`Dataset`.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise AttackError(f"fractions {fractions} must be three non-negative values summing to <= 1")
    if fractions[0] <= 0 or fractions[1] <= 0:
        raise AttackError("train and test fractions must be positive")
    rng = np.random.default_rng(seed)
    parts: List[List[np.ndarray]] = [[], [], []]
    pools = {}
    for c in range(1, full.n_classes + 1):
        rows = np.flatnonzero(full.labels == c)
        sizes = [int(np.floor(f * rows.size + 1e-9)) for f in fractions]
        if any(s == 0 for s, f in zip(sizes, fractions) if f > 0):
            raise AttackError(f"class {c} has {rows.size} samples, too few for fractions {fractions}")
        perm = rows[rng.permutation(rows.size)]
        cuts = np.cumsum(sizes)
        train_rows, test_rows, pool_rows = perm[:cuts[0]], perm[cuts[0]:cuts[1]], perm[cuts[1]:cuts[2]]
        parts[0].append(np.sort(train_rows))
        parts[1].append(np.sort(test_rows))
        pools[c] = full.subset(np.sort(pool_rows)) if pool_rows.size else None
    train = full.subset(np.concatenate(parts[0]))
    test = full.subset(np.concatenate(parts[1]))
    return train, test, pools


def inject(clean: Dataset, pools: Dict[int, Dataset], spec: AttackSpec) -> PoisonedDataset:
    """Append relabeled donor samples to ``clean`` and shuffle.

    Donor samples are drawn without replacement per donor class.  With no
    injections the clean set is returned unchanged.
    """
    demand: Dict[int, int] = {}
    for donor, victim, count in spec.injections:
        for c in (donor, victim):
            if c < 1 or c > clean.n_classes:
                raise AttackError(f"class {c} outside 1..{clean.n_classes}")
        demand[donor] = demand.get(donor, 0) + count
    for donor, need in demand.items():
        have = 0 if pools.get(donor) is None else pools[donor].T
        if need > have:
            raise AttackError(f"class {donor} pool has {have} samples, {need} requested")
    if spec.total == 0:
        return PoisonedDataset(clean, np.zeros(clean.T, bool), {})

    rng = np.random.default_rng(spec.seed)
    order = {d: rng.permutation(pools[d].T) for d in sorted(demand) if demand[d]}
    used = {d: 0 for d in order}
    blocks, origin = [], []
    for donor, victim, count in spec.injections:
        if count == 0:
            continue
        pick = order[donor][used[donor]:used[donor] + count]
        used[donor] += count
        pool = pools[donor]
        blocks.append(Dataset(pool.X[pick], np.full(count, victim), pool.feature_kind,
                              clean.n_classes))
        origin += [(donor, victim)] * count
    injected = concatenate(blocks, clean.n_classes)
    combined = Dataset(
        np.vstack([clean.X, injected.X]),
        np.concatenate([clean.labels, injected.labels]),
        clean.feature_kind,
        clean.n_classes,
        np.concatenate([np.zeros(clean.T, bool), np.ones(injected.T, bool)]),
    )
    perm = rng.permutation(combined.T)
    shuffled = combined.subset(perm)
    shuffled.ids = np.arange(shuffled.T)
    provenance = {}
    for new_row, old_row in enumerate(perm):
        if old_row >= clean.T:
            provenance[new_row] = origin[old_row - clean.T]
    return PoisonedDataset(shuffled, shuffled.poison_truth.copy(), provenance)


def even_split(budget: int, victims: Sequence[int]) -> Dict[int, int]:
    """Spread ``budget`` over ``victims``; the remainder goes to the lowest ids."""
    victims = sorted(victims)
    base, extra = divmod(int(budget), len(victims))
    return {w: base + (1 if i < extra else 0) for i, w in enumerate(victims)}


def multiclass_attack(clean: Dataset, pools, i: int, per_donor_budget: int, seed: int = 0):
    """Donor classes ``1..i`` each spread their budget over all other classes."""
    W = clean.n_classes
    if not 1 <= i <= W:
        raise AttackError(f"attack index {i} outside 1..{W}")
    injections = []
    for c in range(1, i + 1):
        for w, n in even_split(per_donor_budget, [w for w in range(1, W + 1) if w != c]).items():
            injections.append((c, w, n))
    return inject(clean, pools, AttackSpec(injections, seed))
