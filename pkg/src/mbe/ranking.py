"""Filtered ranks and the two link-prediction metrics."""
from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np

from mbe.kg import Fact


def filtered_rank(scores: Mapping[int, float], gold: int, known_answers: Iterable[int]) -> float:
    """Rank of ``gold`` among the scored entities, other known answers removed.

    Ties count half, which places gold at the mean position of its tie group.
    """
    if gold not in scores:
        raise KeyError(f"gold entity {gold} has no score")
    g = scores[gold]
    skip = set(known_answers)
    greater = ties = 0
    for e, s in scores.items():
        if e == gold or e in skip:
            continue
        if s > g:
            greater += 1
        elif s == g:
            ties += 1
    return 1.0 + greater + 0.5 * ties


def rank_vector(scores: np.ndarray, candidates: np.ndarray, gold: int, known_answers: Iterable[int]) -> float:
    """Vectorised :func:`filtered_rank` over a dense score vector restricted to ``candidates``."""
    scores = np.asarray(scores, dtype=np.float64)
    cand = np.asarray(candidates, dtype=np.int64)
    keep = cand != gold
    known = np.fromiter(known_answers, dtype=np.int64)
    if known.size:
        keep &= ~np.isin(cand, known)
    others = scores[cand[keep]]
    g = scores[gold]
    return 1.0 + float(np.count_nonzero(others > g)) + 0.5 * float(np.count_nonzero(others == g))


def metrics(ranks: Sequence[float]) -> tuple[float, float]:
    """(Hits@1, MRR)."""
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0:
        raise ValueError("metrics of an empty rank list")
    if np.any(r < 1):
        raise ValueError("ranks must be >= 1")
    return float(np.mean(r == 1.0)), float(np.mean(1.0 / r))


class AnswerIndex:
    """All tails seen for each (head, relation) pair."""

    def __init__(self, facts: Iterable[Fact] = ()):
        self._tails: dict[tuple[int, int], set[int]] = defaultdict(set)
        for f in facts:
            self._tails[(f.head, f.relation)].add(f.tail)

    def answers(self, head: int, relation: int) -> set[int]:
        return self._tails.get((head, relation), set())

    def known_except(self, head: int, relation: int, gold: int) -> set[int]:
        return self.answers(head, relation) - {gold}
