"""Seeded train/test and k-fold partitions of volume ids."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np


@dataclass
class SplitPlan:
    kind: str
    assignments: Dict[str, object]
    seed: int

    def members(self, part) -> List[str]:
        return [k for k, v in self.assignments.items() if v == part]

    @property
    def parts(self) -> list:
        return sorted(set(self.assignments.values()), key=str)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"kind": self.kind, "seed": self.seed, "assignments": self.assignments}, fh, indent=2)

    @classmethod
    def from_json(cls, path) -> "SplitPlan":
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["kind"], d["assignments"], d["seed"])


def _shuffled(ids: Sequence[str], seed: int) -> List[str]:
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise ValueError("volume ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    return [ids[i] for i in order]


def holdout_split(ids: Sequence[str], train_fraction: float = 0.8, seed: int = 0) -> SplitPlan:
    """Train gets ``round(train_fraction * n)`` ids; the remainder is test."""
    if len(ids) < 2:
        raise ValueError("holdout split needs at least two ids")
    ids = _shuffled(ids, seed)
    n_train = int(round(train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    return SplitPlan("holdout", {k: ("train" if i < n_train else "test") for i, k in enumerate(ids)}, seed)


def kfold_split(ids: Sequence[str], k: int = 10, seed: int = 0) -> SplitPlan:
    """Assign each id a fold in ``0..k-1``; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(ids) < k:
        raise ValueError(f"need at least {k} ids for {k}-fold split, got {len(ids)}")
    ids = _shuffled(ids, seed)
    folds = np.array_split(np.arange(len(ids)), k)
    return SplitPlan("kfold", {ids[i]: f for f, idx in enumerate(folds) for i in idx}, seed)
