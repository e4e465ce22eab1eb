"""Dataset split strategies: leave-one-session-out (global shuffled folds),
leave-one-person-out, and its variant that also carves a post-deployment
training stream out of the held-out user's samples."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import WindowedDataset
from .errors import DomainError

VALIDATION_FRACTION = 0.2


class Strategy(str, enum.Enum):
    L1SO = "l1so"
    L1PO = "l1po"
    L1PO2 = "l1po2"


@dataclass
class SplitRound:
    offline_train: np.ndarray
    offline_val: np.ndarray
    odtl_train: np.ndarray
    test: np.ndarray
    user: int | None = None

    def index_sets(self):
        return (self.offline_train, self.offline_val, self.odtl_train, self.test)


@dataclass
class SplitPlan:
    strategy: Strategy
    rounds: list[SplitRound] = field(default_factory=list)
    train_fraction: float | None = None


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_take(indices, labels, fraction: float, rng: np.random.Generator):
    """Split ``indices`` into (taken, rest) with ~``fraction`` of each class taken.

    Per-class counts are rounded half-up, then classes are nudged by at most
    one sample each so the total matches ``round_half_up(fraction * n)``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    lab = np.asarray(labels)[indices]
    classes = np.unique(lab)
    exact = {c: fraction * np.sum(lab == c) for c in classes}
    take = {c: _round_half_up(exact[c]) for c in classes}
    target = _round_half_up(fraction * len(indices))
    diff = sum(take.values()) - target
    # drop from classes that were rounded up the most, add to those rounded down the most
    order = sorted(classes, key=lambda c: (take[c] - exact[c], -c), reverse=diff > 0)
    for c in order[:abs(diff)]:
        take[c] += -1 if diff > 0 else 1
        take[c] = min(max(take[c], 0), int(np.sum(lab == c)))
    taken, rest = [], []
    for c in classes:
        members = indices[lab == c]
        members = members[rng.permutation(len(members))]
        taken.append(members[:take[c]])
        rest.append(members[take[c]:])
    taken = np.sort(np.concatenate(taken)) if taken else np.zeros(0, np.int64)
    rest = np.sort(np.concatenate(rest)) if rest else np.zeros(0, np.int64)
    return taken, rest


def offline_split(pool, labels, rng, val_fraction=VALIDATION_FRACTION):
    val, train = stratified_take(pool, labels, val_fraction, rng)
    if len(val) == 0 and len(train) > 1:
        val, train = train[:1], train[1:]
    return train, val


def _round_rng(seed: int, round_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_id]))


def make_l1so(ds: WindowedDataset, M: int, seed: int = 0,
              val_fraction: float = VALIDATION_FRACTION) -> SplitPlan:
    """``M`` folds over a global shuffle; fold sizes differ by at most one."""
    n = len(ds)
    if M < 2:
        raise DomainError("L1SO needs M >= 2")
    if M > n:
        raise DomainError(f"cannot split {n} samples into {M} folds")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, M)
    plan = SplitPlan(Strategy.L1SO)
    for m, fold in enumerate(folds):
        pool = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != m]))
        train, val = offline_split(pool, ds.labels, _round_rng(seed, m), val_fraction)
        plan.rounds.append(SplitRound(train, val, np.zeros(0, np.int64), np.sort(fold)))
    return plan


def make_l1po(ds: WindowedDataset, seed: int = 0,
              val_fraction: float = VALIDATION_FRACTION) -> SplitPlan:
    users = ds.user_ids
    if len(users) < 2:
        raise DomainError("L1PO needs at least two distinct users")
    plan = SplitPlan(Strategy.L1PO)
    for r, u in enumerate(users):
        test = np.flatnonzero(ds.users == u)
        pool = np.flatnonzero(ds.users != u)
        train, val = offline_split(pool, ds.labels, _round_rng(seed, r), val_fraction)
        plan.rounds.append(SplitRound(train, val, np.zeros(0, np.int64), test, user=u))
    return plan


def make_l1po2(ds: WindowedDataset, train_fraction: float = 0.4, seed: int = 0,
               val_fraction: float = VALIDATION_FRACTION) -> SplitPlan:
    if not 0.0 < train_fraction < 1.0:
        raise DomainError("train_fraction must lie in (0, 1)")
    base = make_l1po(ds, seed, val_fraction)
    plan = SplitPlan(Strategy.L1PO2, train_fraction=train_fraction)
    for r, rnd in enumerate(base.rounds):
        user_idx = rnd.test
        present = np.unique(ds.labels[user_idx])
        if len(present) != ds.classes:
            missing = sorted(set(range(ds.classes)) - set(present.tolist()))
            raise DomainError(f"user {rnd.user} has no samples of classes {missing}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, r, 2]))
        odtl, test = stratified_take(user_idx, ds.labels, train_fraction, rng)
        plan.rounds.append(SplitRound(rnd.offline_train, rnd.offline_val, odtl, test, user=rnd.user))
    return plan


def make_plan(ds: WindowedDataset, strategy: Strategy | str, seed: int = 0,
              M: int | None = None, train_fraction: float = 0.4) -> SplitPlan:
    strategy = Strategy(strategy)
    if strategy is Strategy.L1SO:
        # fold count pairs with the number of contributors
        return make_l1so(ds, M or len(ds.user_ids), seed)
    if strategy is Strategy.L1PO:
        return make_l1po(ds, seed)
    return make_l1po2(ds, train_fraction, seed)
