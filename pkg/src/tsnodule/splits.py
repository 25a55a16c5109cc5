"""Stratified train/test split and stratified k-fold plans."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import rng_for


@dataclass(frozen=True)
class SplitPlan:
    train_ids: list
    test_ids: list
    seed: int
    fraction: float = 0.7


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: list[list]
    seed: int = 0

    def train_ids(self, i: int) -> list:
        return [s for j, f in enumerate(self.folds) if j != i for s in f]


def _classes(ids, labels):
    ids = list(ids)
    labels = np.asarray(labels)
    if len(ids) != len(labels):
        raise ValueError(f"{len(ids)} ids but {len(labels)} labels")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")
    groups = {c: [i for i, y in zip(ids, labels) if y == c] for c in (0, 1)}
    for c, members in groups.items():
        if not members:
            raise ValueError(f"class {c} is empty")
    return groups


def _shuffled(members, seed, tag, c):
    order = rng_for(seed, tag, c).permutation(len(members))
    return [members[i] for i in order]


def stratified_split(ids, labels, fraction: float = 0.7, seed: int = 0) -> SplitPlan:
    """Per class, take ``round(fraction * n)`` shuffled ids for training."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    train, test = [], []
    for c, members in _classes(ids, labels).items():
        members = _shuffled(members, seed, "split", c)
        n_train = int(round(fraction * len(members)))
        train += members[:n_train]
        test += members[n_train:]
    return SplitPlan(sorted(train), sorted(test), seed, fraction)


def stratified_kfold(ids, labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Round-robin each shuffled class over the folds."""
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    folds = [[] for _ in range(k)]
    start = 0
    for c, members in _classes(ids, labels).items():
        if len(members) < k:
            raise ValueError(f"class {c} has {len(members)} members, fewer than k={k}")
        for j, sid in enumerate(_shuffled(members, seed, "kfold", c)):
            folds[(start + j) % k].append(sid)
        # continue where the previous class stopped so fold sizes stay balanced
        start = (start + len(members)) % k
    return FoldPlan(k, [sorted(f) for f in folds], seed)
