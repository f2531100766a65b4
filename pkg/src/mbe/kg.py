"""Vocabulary, facts and the indexed graph snapshot the agent walks on."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INVERSE_SUFFIX = "^-"
SELF_LOOP = "<self_loop>"
START = "<start>"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class Vocabulary:
    """Dense ids for entities and relations.

    Relation ids follow a fixed layout: base relations ``0..n-1``, their
    inverses ``n..2n-1``, then the self-loop ``2n`` and the start relation
    ``2n+1``. Interning a new relation therefore shifts the derived ids, so
    the relation set is normally frozen once the training split is loaded.
    """

    def __init__(self):
        self._entities: list[str] = []
        self._entity_ids: dict[str, int] = {}
        self._relations: list[str] = []
        self._relation_ids: dict[str, int] = {}
        self._frozen = False

    # -- interning -----------------------------------------------------------
    def intern(self, label: str, kind: str) -> int:
        if not isinstance(label, str) or not label:
            raise ValueError("intern: label must be a non-empty string")
        if kind == "entity":
            if label in self._relation_ids:
                raise ValueError(f"intern: {label!r} is already a relation")
            eid = self._entity_ids.get(label)
            if eid is None:
                eid = self._entity_ids[label] = len(self._entities)
                self._entities.append(label)
            return eid
        if kind == "relation":
            if label in self._entity_ids:
                raise ValueError(f"intern: {label!r} is already an entity")
            if label in (SELF_LOOP, START) or label.endswith(INVERSE_SUFFIX):
                raise ValueError(f"intern: {label!r} is a reserved relation label")
            rid = self._relation_ids.get(label)
            if rid is None:
                if self._frozen:
                    raise DataError(f"unknown relation {label!r} (relation set is frozen)")
                rid = self._relation_ids[label] = len(self._relations)
                self._relations.append(label)
            return rid
        raise ValueError(f"intern: unknown kind {kind!r}")

    def freeze_relations(self) -> None:
        self._frozen = True

    @property
    def relations_frozen(self) -> bool:
        return self._frozen

    # -- sizes and layout ----------------------------------------------------
    @property
    def n_entities(self) -> int:
        return len(self._entities)

    @property
    def n_base_relations(self) -> int:
        return len(self._relations)

    @property
    def n_relations(self) -> int:
        return 2 * len(self._relations) + 2

    @property
    def self_loop(self) -> int:
        return 2 * len(self._relations)

    @property
    def start(self) -> int:
        return 2 * len(self._relations) + 1

    def inverse(self, r: int) -> int:
        n = len(self._relations)
        if 0 <= r < n:
            return r + n
        if n <= r < 2 * n:
            return r - n
        if r == self.self_loop:
            return r
        raise ValueError(f"relation {r} has no inverse")

    def is_base(self, r: int) -> bool:
        return 0 <= r < len(self._relations)

    def base_of(self, r: int) -> int:
        """Base relation id for a base or inverse id."""
        n = len(self._relations)
        if 0 <= r < 2 * n:
            return r % n
        raise ValueError(f"relation {r} is not a base or inverse relation")

    # -- lookup --------------------------------------------------------------
    def entity_id(self, label: str) -> int:
        try:
            return self._entity_ids[label]
        except KeyError:
            raise KeyError(f"unknown entity {label!r}") from None

    def has_entity(self, label: str) -> bool:
        return label in self._entity_ids

    def relation_id(self, label: str) -> int:
        if label == SELF_LOOP:
            return self.self_loop
        if label == START:
            return self.start
        if label.endswith(INVERSE_SUFFIX):
            return self.inverse(self.relation_id(label[: -len(INVERSE_SUFFIX)]))
        try:
            return self._relation_ids[label]
        except KeyError:
            raise KeyError(f"unknown relation {label!r}") from None

    def entity_label(self, eid: int) -> str:
        return self._entities[eid]

    def relation_label(self, rid: int) -> str:
        n = len(self._relations)
        if 0 <= rid < n:
            return self._relations[rid]
        if n <= rid < 2 * n:
            return self._relations[rid - n] + INVERSE_SUFFIX
        if rid == self.self_loop:
            return SELF_LOOP
        if rid == self.start:
            return START
        raise KeyError(f"unknown relation id {rid}")

    @property
    def relation_labels(self) -> list[str]:
        return list(self._relations)

    @property
    def entity_labels(self) -> list[str]:
        return list(self._entities)

    @classmethod
    def from_relations(cls, labels: Sequence[str]) -> "Vocabulary":
        v = cls()
        for lab in labels:
            v.intern(lab, "relation")
        v.freeze_relations()
        return v


class Source(enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    SUPPORT = "support"
    QUERY = "query"
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class Provenance:
    source: Source
    batch: int = 0

    def __str__(self) -> str:
        if self.source in (Source.SUPPORT, Source.QUERY):
            return f"batch{self.batch}-{self.source.value}"
        return self.source.value


TRAIN = Provenance(Source.TRAIN)
VALID = Provenance(Source.VALID)
AUGMENTED = Provenance(Source.AUGMENTED)


def support(batch: int) -> Provenance:
    return Provenance(Source.SUPPORT, batch)


def query(batch: int) -> Provenance:
    return Provenance(Source.QUERY, batch)


@dataclass(frozen=True)
class Fact:
    head: int
    relation: int
    tail: int
    provenance: Provenance = TRAIN

    @property
    def triple(self) -> tuple[int, int, int]:
        return (self.head, self.relation, self.tail)


# ---------------------------------------------------------------------------
# triple files
# ---------------------------------------------------------------------------

def read_triples(path: str | Path) -> list[tuple[str, str, str, int]]:
    """Parse a TAB-separated triple file into ``(head, relation, tail, line_no)``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise DataError(f"{path}:{no}: expected head<TAB>relation<TAB>tail")
            out.append((parts[0], parts[1], parts[2], no))
    return out


def write_triples(path: str | Path, triples: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in triples:
            fh.write(f"{h}\t{r}\t{t}\n")


def intern_facts(vocab: Vocabulary, rows, provenance: Provenance, where: str = "") -> list[Fact]:
    """Turn label rows into facts; unknown relations are collected and reported together."""
    facts, bad = [], []
    for row in rows:
        h, r, t = row[0], row[1], row[2]
        no = row[3] if len(row) > 3 else None
        try:
            rid = vocab.intern(r, "relation")
        except DataError:
            bad.append(f"{where}:{no}" if no is not None else f"{h}\t{r}\t{t}")
            continue
        facts.append(Fact(vocab.intern(h, "entity"), rid, vocab.intern(t, "entity"), provenance))
    if bad:
        raise DataError("unknown relation label on line(s): " + ", ".join(bad))
    return facts


# ---------------------------------------------------------------------------
# snapshot
# ---------------------------------------------------------------------------

class GraphSnapshot:
    """Immutable indexed view over an ordered fact list.

    Inverse and self-loop edges are never stored; they are produced by
    :meth:`action_space` and :meth:`action_table`. Duplicate facts are kept,
    each occurrence addressable by its ordinal.
    """

    def __init__(self, vocab: Vocabulary, facts: Sequence[Fact], active_batches: int = 0):
        self.vocab = vocab
        self.facts: tuple[Fact, ...] = tuple(facts)
        self.active_batches = active_batches
        self.n_entities = vocab.n_entities
        n_base = vocab.n_base_relations
        f = len(self.facts)
        self.heads = np.fromiter((x.head for x in self.facts), dtype=np.int64, count=f)
        self.relations = np.fromiter((x.relation for x in self.facts), dtype=np.int64, count=f)
        self.tails = np.fromiter((x.tail for x in self.facts), dtype=np.int64, count=f)
        if f and (self.relations.min() < 0 or self.relations.max() >= n_base):
            raise DataError("stored facts must use base relation ids")
        if f and max(self.heads.max(), self.tails.max()) >= self.n_entities:
            raise DataError("fact references an entity outside the vocabulary")
        self.augmented = np.fromiter((x.provenance.source is Source.AUGMENTED for x in self.facts),
                                     dtype=bool, count=f)
        ordinals = np.arange(f, dtype=np.int64)
        self._out_ptr, self._out_ord = _csr(self.heads, ordinals, self.n_entities)
        self._in_ptr, self._in_ord = _csr(self.tails, ordinals, self.n_entities)
        self.degree = np.diff(self._out_ptr) + np.diff(self._in_ptr)
        self._tables: dict = {}
        for arr in (self.heads, self.relations, self.tails, self.augmented, self.degree,
                    self._out_ptr, self._out_ord, self._in_ptr, self._in_ord):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.facts)

    def has_entity(self, e: int) -> bool:
        return 0 <= e < self.n_entities and self.degree[e] > 0

    def entities(self) -> np.ndarray:
        return np.flatnonzero(self.degree > 0)

    def out_index(self, e: int) -> list[tuple[int, int, int]]:
        """(relation, tail, ordinal) for facts with head ``e``."""
        ords = self._out_ord[self._out_ptr[e]:self._out_ptr[e + 1]]
        return [(int(self.relations[o]), int(self.tails[o]), int(o)) for o in ords]

    def in_index(self, e: int) -> list[tuple[int, int, int]]:
        """(relation, head, ordinal) for facts with tail ``e``."""
        ords = self._in_ord[self._in_ptr[e]:self._in_ptr[e + 1]]
        return [(int(self.relations[o]), int(self.heads[o]), int(o)) for o in ords]

    def ordinal_of(self, fact: Fact) -> int:
        """Ordinal of the first stored occurrence equal to ``fact``."""
        for _, _, o in self.out_index(fact.head):
            if self.facts[o] == fact:
                return o
        raise KeyError(f"fact {fact} not in snapshot")

    def _edges(self, at: int, limit: int | None) -> list[tuple[int, int, int, int]]:
        """(ordinal, direction, relation, neighbour) sorted by ordinal, out before in."""
        inv = self.vocab.n_base_relations
        edges = [(o, 0, r, t) for r, t, o in self.out_index(at)]
        edges += [(o, 1, r + inv, h) for r, h, o in self.in_index(at)]
        edges.sort()
        if limit is not None and len(edges) > limit:
            edges = edges[-limit:]
        return edges

    def action_space(self, at: int, mask: Fact | int | None = None,
                     limit: int | None = None) -> list[tuple[int, int]]:
        """Outgoing, inverse and self-loop actions available at ``at``.

        ``mask`` (a fact ordinal or a stored fact) removes both directions of
        exactly that occurrence; duplicates stay traversable.
        """
        if not self.has_entity(at):
            raise KeyError(f"entity {at} is not in this snapshot")
        if isinstance(mask, Fact):
            mask = self.ordinal_of(mask)
        acts = [(r, e) for o, _, r, e in self._edges(at, limit) if o != mask]
        acts.append((self.vocab.self_loop, at))
        return acts

    def action_table(self, limit: int | None = None):
        """Padded per-entity action arrays ``(rel, ent, ordinal, valid)`` of shape (N, K).

        Column order matches :meth:`action_space`; the self-loop is the last
        valid column and carries ordinal -1.
        """
        key = limit
        if key in self._tables:
            return self._tables[key]
        n = self.n_entities
        per = [self._edges(e, limit) if self.degree[e] > 0 else [] for e in range(n)]
        k = 1 + max((len(p) for p in per), default=0)
        rel = np.zeros((n, k), dtype=np.int64)
        ent = np.zeros((n, k), dtype=np.int64)
        ords = np.full((n, k), -1, dtype=np.int64)
        valid = np.zeros((n, k), dtype=bool)
        sl = self.vocab.self_loop
        for e, edges in enumerate(per):
            m = len(edges)
            if m:
                arr = np.asarray(edges, dtype=np.int64)
                ords[e, :m] = arr[:, 0]
                rel[e, :m] = arr[:, 2]
                ent[e, :m] = arr[:, 3]
                valid[e, :m] = True
            rel[e, m] = sl
            ent[e, m] = e
            valid[e, m] = True
        ent[~valid] = np.arange(n).repeat(k).reshape(n, k)[~valid]
        rel[~valid] = sl
        for arr in (rel, ent, ords, valid):
            arr.setflags(write=False)
        self._tables[key] = (rel, ent, ords, valid)
        return self._tables[key]

    def merge_batch(self, batch_facts: Sequence[Fact]) -> "GraphSnapshot":
        """New snapshot with ``batch_facts`` appended; this one is left untouched."""
        self._check_new(batch_facts)
        return GraphSnapshot(self.vocab, self.facts + tuple(batch_facts), self.active_batches + 1)

    def with_facts(self, extra: Sequence[Fact]) -> "GraphSnapshot":
        """Same batch count, extra facts appended (used to splice augmented facts)."""
        self._check_new(extra)
        return GraphSnapshot(self.vocab, self.facts + tuple(extra), self.active_batches)

    def _check_new(self, facts: Sequence[Fact]) -> None:
        n_base = self.vocab.n_base_relations
        bad = [f for f in facts if not 0 <= f.relation < n_base]
        if bad:
            raise DataError(f"{len(bad)} fact(s) use unknown or non-base relation ids, e.g. {bad[0]}")

    def degree_stats(self, subset: Iterable[int]) -> float:
        """Average number of stored-fact incidences per entity in ``subset``."""
        ids = np.fromiter(subset, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("degree_stats: empty subset")
        if ids.max() >= self.n_entities or ids.min() < 0:
            raise KeyError("degree_stats: subset contains unknown entities")
        return float(self.degree[ids].sum()) / ids.size

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.heads, self.relations, self.tails, self.augmented,
                    self._out_ptr, self._out_ord, self._in_ptr, self._in_ord):
            h.update(arr.tobytes())
        h.update(str(self.active_batches).encode())
        return h.hexdigest()


def _csr(keys: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n) if keys.size else np.zeros(n, dtype=np.int64)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, values[order]
