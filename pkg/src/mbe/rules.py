"""Walk-based rules: trajectory statistics, trustworthy selection and link augmentation."""
from __future__ import annotations

import re
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from mbe import kg
from mbe.kg import DataError, Fact, GraphSnapshot, Vocabulary

IMPORT_SCALE = 100


@dataclass(frozen=True, order=True)
class RuleKey:
    query_relation: int
    body: tuple[int, ...]


@dataclass
class RuleStats:
    pos: int = 0
    neg: int = 0


class RuleStore:
    """Map from rule key to (pos, neg) counts, indexed by query relation."""

    def __init__(self):
        self._stats: dict[RuleKey, RuleStats] = {}
        self._by_rel: dict[int, set[RuleKey]] = defaultdict(set)
        self.version = 0
        self.frozen_overlay = False

    def __len__(self) -> int:
        return len(self._stats)

    def __contains__(self, key: RuleKey) -> bool:
        return key in self._stats

    def __getitem__(self, key: RuleKey) -> RuleStats:
        return self._stats[key]

    def items(self):
        return self._stats.items()

    def keys(self):
        return self._stats.keys()

    def query_relations(self) -> list[int]:
        return sorted(r for r, ks in self._by_rel.items() if ks)

    def rules_for(self, query_relation: int) -> list[RuleKey]:
        return sorted(self._by_rel.get(query_relation, ()))

    def add(self, key: RuleKey, pos: int = 0, neg: int = 0) -> None:
        if pos < 0 or neg < 0:
            raise ValueError("rule counts must be non-negative")
        if pos + neg == 0:
            return
        st = self._stats.get(key)
        if st is None:
            st = self._stats[key] = RuleStats()
            self._by_rel[key.query_relation].add(key)
        st.pos += pos
        st.neg += neg
        self.version += 1

    def set(self, key: RuleKey, stats: RuleStats) -> None:
        if stats.pos + stats.neg < 1:
            raise ValueError("stored rules need pos + neg >= 1")
        self._stats[key] = RuleStats(stats.pos, stats.neg)
        self._by_rel[key.query_relation].add(key)
        self.version += 1

    def merge(self, other: "RuleStore") -> None:
        """Fold another store's counts into this one (per-worker reduction)."""
        for key, st in other.items():
            self.add(key, st.pos, st.neg)

    def copy(self) -> "RuleStore":
        out = RuleStore()
        for key, st in self._stats.items():
            out.set(key, st)
        out.frozen_overlay = self.frozen_overlay
        return out

    def total_pos(self, query_relation: int) -> int:
        return sum(self._stats[k].pos for k in self._by_rel.get(query_relation, ()))

    def to_json(self) -> list:
        return [[k.query_relation, list(k.body), st.pos, st.neg] for k, st in sorted(self._stats.items())]

    @classmethod
    def from_json(cls, rows) -> "RuleStore":
        out = cls()
        for rq, body, pos, neg in rows:
            out.set(RuleKey(int(rq), tuple(int(b) for b in body)), RuleStats(int(pos), int(neg)))
        return out


def strip_self_loops(relations: Iterable[int], self_loop: int) -> tuple[int, ...]:
    return tuple(r for r in relations if r != self_loop)


def record_trajectory(store: RuleStore, query_relation: int, trajectory: Sequence[int],
                      success: bool, self_loop: int) -> RuleKey | None:
    """Count one rollout; ``trajectory`` is its sequence of relation ids."""
    body = strip_self_loops(trajectory, self_loop)
    if not body:
        return None
    key = RuleKey(query_relation, body)
    store.add(key, pos=1 if success else 0, neg=0 if success else 1)
    return key


def confidence(stats: RuleStats) -> float:
    total = stats.pos + stats.neg
    if total <= 0:
        raise ValueError("confidence undefined for a rule with no trajectories")
    return stats.pos / total


def trustworthy_rules(store: RuleStore, min_conf: float, min_support: int) -> dict[int, list[RuleKey]]:
    """Rules with confidence >= ``min_conf`` and pos >= ``min_support``, grouped by query relation."""
    out: dict[int, list[RuleKey]] = {}
    for rq in store.query_relations():
        keep = [k for k in store.rules_for(rq)
                if store[k].pos >= min_support and confidence(store[k]) >= min_conf]
        if keep:
            out[rq] = keep
    return out


def follow_body(snapshot: GraphSnapshot, start: int, body: Sequence[int]) -> list[int]:
    """Entities reachable from ``start`` along ``body`` (inverse steps allowed), in discovery order."""
    n_base = snapshot.vocab.n_base_relations
    frontier = [start]
    for r in body:
        nxt: dict[int, None] = {}
        for e in frontier:
            if r < n_base:
                for rel, t, _ in snapshot.out_index(e):
                    if rel == r:
                        nxt.setdefault(t)
            else:
                base = r - n_base
                for rel, h, _ in snapshot.in_index(e):
                    if rel == base:
                        nxt.setdefault(h)
        frontier = list(nxt)
        if not frontier:
            break
    return frontier


def candidate_pairs(snapshot: GraphSnapshot, mode: str = "fact") -> list[tuple[int, int]]:
    """(head, relation) pairs to augment.

    ``fact`` uses pairs that co-occur in a stored fact. ``incident`` pairs
    every head entity with every relation incident to it in either direction.
    """
    seen: dict[tuple[int, int], None] = {}
    if mode == "fact":
        for f in snapshot.facts:
            seen.setdefault((f.head, f.relation))
    elif mode == "incident":
        inc: dict[int, set[int]] = defaultdict(set)
        for f in snapshot.facts:
            inc[f.head].add(f.relation)
            inc[f.tail].add(f.relation)
        for f in snapshot.facts:
            for r in sorted(inc[f.head]):
                seen.setdefault((f.head, r))
    else:
        raise ValueError(f"unknown candidate mode {mode!r}")
    return list(seen)


def augment(snapshot: GraphSnapshot, trusted: dict[int, list[RuleKey]],
            max_new_per_pair: int | None = 50, mode: str = "fact") -> list[Fact]:
    """Rule-derived facts for every candidate (head, query relation) pair.

    Facts that already exist in the snapshot are still emitted; they become
    augmented duplicates that survive masking of the original. Each distinct
    triple is emitted once. ``max_new_per_pair=None`` disables the cap.
    """
    out: list[Fact] = []
    if not trusted:
        return out
    for head, rq in candidate_pairs(snapshot, mode):
        bodies = trusted.get(rq)
        if not bodies:
            continue
        tails: dict[int, None] = {}
        for key in bodies:
            for t in follow_body(snapshot, head, key.body):
                tails.setdefault(t)
                if max_new_per_pair is not None and len(tails) >= max_new_per_pair:
                    break
            if max_new_per_pair is not None and len(tails) >= max_new_per_pair:
                break
        out.extend(Fact(head, rq, t, kg.AUGMENTED) for t in tails)
    return out


# ---------------------------------------------------------------------------
# rule files
# ---------------------------------------------------------------------------

_LINE = re.compile(
    r"^\s*(?P<head>\S+)\s*<=\s*(?P<body>.+?)\s*\|\s*conf=(?P<conf>\S+)\s+support=(?P<support>\S+)\s*$")


def parse_rules(text: str, vocab: Vocabulary, where: str = "<rules>") -> RuleStore:
    """Parse ``head <= b1, b2 | conf=<float> support=<int>`` lines into a fixed store.

    Counts are synthesised as pos = round(support * conf * 100) and
    neg = support * 100 - pos, which preserves both the confidence and the
    relative support ordering.
    """
    store = RuleStore()
    for no, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        m = _LINE.match(line)
        if not m:
            raise DataError(f"{where}:{no}: malformed rule line")
        try:
            conf = float(m["conf"])
            support = int(m["support"])
        except ValueError:
            raise DataError(f"{where}:{no}: bad conf/support value") from None
        if not 0.0 <= conf <= 1.0 or support < 1:
            raise DataError(f"{where}:{no}: conf must be in [0,1] and support >= 1")
        try:
            head = vocab.relation_id(m["head"])
            body = tuple(vocab.relation_id(b.strip()) for b in m["body"].split(","))
        except KeyError as exc:
            raise DataError(f"{where}:{no}: {exc.args[0]}") from None
        if not vocab.is_base(head):
            raise DataError(f"{where}:{no}: rule head must be a base relation")
        if any(b in (vocab.self_loop, vocab.start) for b in body):
            raise DataError(f"{where}:{no}: rule bodies cannot contain special relations")
        key = RuleKey(head, body)
        pos = int(round(support * conf * IMPORT_SCALE))
        neg = support * IMPORT_SCALE - pos
        if key in store:
            warnings.warn(f"{where}:{no}: duplicate rule {m['head']} <= {m['body']}; last one wins",
                          stacklevel=2)
        store.set(key, RuleStats(pos, neg))
    store.frozen_overlay = True
    return store


def import_rules(path: str | Path, vocab: Vocabulary) -> RuleStore:
    return parse_rules(Path(path).read_text(encoding="utf-8"), vocab, str(path))


def format_rules(store: RuleStore, vocab: Vocabulary) -> str:
    """Rule-file text sorted by confidence, then support.

    Rules without a positive trajectory are skipped: they add nothing to
    attention or augmentation and cannot be written with support >= 1.
    """
    rows = sorted(((k, st) for k, st in store.items() if st.pos > 0),
                  key=lambda kv: (-confidence(kv[1]), -kv[1].pos, kv[0]))
    lines = []
    for key, st in rows:
        body = ", ".join(vocab.relation_label(r) for r in key.body)
        lines.append(f"{vocab.relation_label(key.query_relation)} <= {body} | "
                     f"conf={confidence(st):.6g} support={st.pos}")
    return "\n".join(lines) + ("\n" if lines else "")


def export_rules(store: RuleStore, vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(format_rules(store, vocab), encoding="utf-8")
