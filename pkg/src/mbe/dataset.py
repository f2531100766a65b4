"""Multi-batch emergence datasets: container, builder, validator and file I/O."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mbe import kg
from mbe.kg import DataError, Fact, GraphSnapshot, Vocabulary

log = logging.getLogger(__name__)

MAX_GROW_ROUNDS = 100


@dataclass
class BuildConfig:
    n_seeds: int = 5000
    keep_prob: float = 0.5
    num_batches: int = 5
    split_ratio: tuple[int, int] = (4, 1)
    rng_seed: int = 0

    def __post_init__(self):
        self.split_ratio = tuple(self.split_ratio)
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.num_batches < 1:
            raise ValueError("num_batches must be >= 1")
        if len(self.split_ratio) != 2 or min(self.split_ratio) <= 0:
            raise ValueError(f"split_ratio must be two positive integers, got {self.split_ratio}")


@dataclass
class Batch:
    support: list[Fact]
    query: list[Fact]
    entities: set[int] = field(default_factory=set)


@dataclass
class MbeDataset:
    vocab: Vocabulary
    train: list[Fact]
    valid: list[Fact]
    batches: list[Batch]
    original_entities: set[int] = field(default_factory=set)
    dropped: int = 0

    @property
    def num_batches(self) -> int:
        return len(self.batches)

    def train_snapshot(self) -> GraphSnapshot:
        return GraphSnapshot(self.vocab, self.train)

    def snapshot(self, upto: int) -> GraphSnapshot:
        """Graph used to answer batch ``upto`` queries: train + valid + supports 1..upto."""
        if not 0 <= upto <= self.num_batches:
            raise IndexError(f"batch index {upto} out of range 0..{self.num_batches}")
        snap = GraphSnapshot(self.vocab, self.train + self.valid)
        for b in self.batches[:upto]:
            snap = snap.merge_batch(b.support)
        return snap

    def visible_facts(self, upto: int) -> list[Fact]:
        """Every fact known by the time batch ``upto`` has arrived (used for filtering)."""
        facts = list(self.train) + list(self.valid)
        for b in self.batches[:upto]:
            facts += b.support + b.query
        return facts

    def stats(self) -> dict:
        ent_t = _entities(self.train)
        out = {
            "train": len(self.train),
            "valid": len(self.valid),
            "original_entities": len(ent_t),
            "relations": len({f.relation for f in self.train}),
            "batches": [
                {"support": len(b.support), "query": len(b.query), "entities": len(b.entities)}
                for b in self.batches
            ],
            "dropped": self.dropped,
        }
        if self.train:
            snap = GraphSnapshot(self.vocab, self.train)
            out["avg_degree_original"] = snap.degree_stats(ent_t)
        new = set().union(*(b.entities for b in self.batches)) if self.batches else set()
        if new:
            snap = GraphSnapshot(self.vocab, [f for b in self.batches for f in b.support + b.query])
            out["avg_degree_new"] = snap.degree_stats(new)
        return out


def _entities(facts: Sequence[Fact]) -> set[int]:
    out = set()
    for f in facts:
        out.add(f.head)
        out.add(f.tail)
    return out


# ---------------------------------------------------------------------------
# spanning split
# ---------------------------------------------------------------------------

def spanning_split(batch_facts: Sequence[Fact], new_entities: set[int],
                   rng_seed: int | None = None) -> tuple[list[Fact], list[Fact]]:
    """Split batch facts into (support, query) with a BFS spanning forest.

    Trees are rooted at previously known entities first (in order of first
    appearance), then at new entities. Tree edges become support facts, so
    every new entity that has a fact ends up in support. The traversal is
    fully determined by fact order; ``rng_seed`` is accepted for interface
    symmetry and unused.
    """
    del rng_seed
    adj: dict[int, list[tuple[int, int]]] = {}
    order: list[int] = []
    for i, f in enumerate(batch_facts):
        for a, b in ((f.head, f.tail), (f.tail, f.head)):
            if a not in adj:
                adj[a] = []
                order.append(a)
            adj[a].append((i, b))
    roots = [e for e in order if e not in new_entities] + [e for e in order if e in new_entities]
    visited: set[int] = set()
    in_tree = np.zeros(len(batch_facts), dtype=bool)
    for root in roots:
        if root in visited:
            continue
        visited.add(root)
        queue = deque([root])
        while queue:
            node = queue.popleft()
            for i, other in adj[node]:
                if other not in visited:
                    visited.add(other)
                    in_tree[i] = True
                    queue.append(other)
    # a new entity whose only facts are self-loops (e, r, e) never becomes a tree child
    covered = set()
    for i, f in enumerate(batch_facts):
        if in_tree[i]:
            covered.update((f.head, f.tail))
    for i, f in enumerate(batch_facts):
        if f.head == f.tail and f.head in new_entities and f.head not in covered:
            in_tree[i] = True
            covered.add(f.head)
    support = [f for i, f in enumerate(batch_facts) if in_tree[i]]
    query = [f for i, f in enumerate(batch_facts) if not in_tree[i]]
    return support, query


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_mbe(ds: MbeDataset) -> list[str]:
    """List violated dataset invariants; empty when the dataset is well formed."""
    problems: list[str] = []
    train_rels = {f.relation for f in ds.train}
    ent_t = _entities(ds.train)
    batch_of: dict[int, int] = {}
    for i, b in enumerate(ds.batches, 1):
        for e in b.entities:
            batch_of[e] = i
    for f in ds.valid:
        if f.relation not in train_rels:
            problems.append(f"no new relations: valid fact {f.triple} uses a relation absent from train")
    for f in ds.valid:
        missing = {f.head, f.tail} - ent_t
        if missing:
            problems.append(f"entity containment: valid fact {f.triple} has entities {sorted(missing)} not in train")
    seen = set(ent_t)
    for i, b in enumerate(ds.batches, 1):
        for f in b.support + b.query:
            if f.relation not in train_rels:
                problems.append(f"no new relations: batch {i} fact {f.triple} uses a relation absent from train")
            for e in (f.head, f.tail):
                j = batch_of.get(e, 0)
                if j > i:
                    problems.append(f"chronological correctness: batch {i} fact {f.triple} touches entity {e} of batch {j}")
        ent_s = _entities(b.support)
        for e in sorted(b.entities - ent_s):
            problems.append(f"support coverage: new entity {e} of batch {i} has no support fact")
        seen |= ent_s
        for f in b.query:
            missing = {f.head, f.tail} - seen
            if missing:
                problems.append(f"entity containment: batch {i} query {f.triple} has unseen entities {sorted(missing)}")
    return problems


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------

class BuildError(RuntimeError):
    pass


def build_mbe(source: Sequence[tuple[str, str, str]], cfg: BuildConfig) -> MbeDataset:
    """Construct an MBE dataset by seeding, growing, dividing and cleaning.

    ``source`` holds label triples; every occurrence ends up in exactly one
    of train, valid, some support set, some query set, or the dropped count.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    ents: list[str] = []
    eidx: dict[str, int] = {}
    rels: list[str] = []
    ridx: dict[str, int] = {}
    triples = []
    for h, r, t in source:
        for lab in (h, t):
            if lab not in eidx:
                eidx[lab] = len(ents)
                ents.append(lab)
        if r not in ridx:
            ridx[r] = len(rels)
            rels.append(r)
        triples.append((eidx[h], ridx[r], eidx[t]))
    n_ent = len(ents)
    if n_ent < 2:
        raise BuildError(f"source has {n_ent} entities; need at least 2")
    if n_ent < cfg.num_batches * 10:
        log.warning("source has only %d entities for %d batches; some batches may be empty",
                    n_ent, cfg.num_batches)
    tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)

    adj: list[list[int]] = [[] for _ in range(n_ent)]
    for h, _, t in triples:
        adj[h].append(t)
        if t != h:
            adj[t].append(h)

    # seeding
    n_seeds = min(cfg.n_seeds, n_ent)
    seeds = rng.choice(n_ent, size=n_seeds, replace=False)
    in_orig = np.zeros(n_ent, dtype=bool)
    in_orig[seeds] = True
    target = (n_ent + 1) // 2

    # growing: BFS from the current original set; visited outsiders join with prob p
    discovery: list[int] = []
    size = int(in_orig.sum())
    rounds = 0
    while size < target:
        if rounds == MAX_GROW_ROUNDS:
            raise BuildError(
                f"growing stalled at {size}/{target} original entities after {MAX_GROW_ROUNDS} "
                "BFS rounds; the source graph is probably too disconnected")
        rounds += 1
        discovery = []
        visited = in_orig.copy()
        queue = deque(int(e) for e in np.flatnonzero(in_orig))
        while queue and size < target:
            node = queue.popleft()
            for nb in adj[node]:
                if visited[nb]:
                    continue
                visited[nb] = True
                queue.append(nb)
                if rng.random() < cfg.keep_prob:
                    in_orig[nb] = True
                    size += 1
                    if size >= target:
                        break
                else:
                    discovery.append(nb)

    # dividing the original KG into train / valid
    both = in_orig[tri[:, 0]] & in_orig[tri[:, 2]] if len(tri) else np.zeros(0, dtype=bool)
    ko_idx = np.flatnonzero(both)
    ko_idx = ko_idx[rng.permutation(len(ko_idx))]
    a, b = cfg.split_ratio
    n_valid = int(round(len(ko_idx) * b / (a + b)))
    ent_count = np.zeros(n_ent, dtype=np.int64)
    rel_count = np.zeros(len(rels), dtype=np.int64)
    for i in ko_idx:
        h, r, t = tri[i]
        ent_count[h] += 1
        ent_count[t] += 1
        rel_count[r] += 1
    valid_mask = np.zeros(len(tri), dtype=bool)
    chosen = 0
    for i in ko_idx:
        if chosen >= n_valid:
            break
        h, r, t = tri[i]
        need_h = 2 if h == t else 1
        # keep every entity and relation of the valid fact alive in train
        if ent_count[h] > need_h and ent_count[t] > need_h and rel_count[r] > 1:
            if h == t:
                ent_count[h] -= 2
            else:
                ent_count[h] -= 1
                ent_count[t] -= 1
            rel_count[r] -= 1
            valid_mask[i] = True
            chosen += 1
    if chosen < n_valid:
        log.warning("only %d of %d validation facts could be drawn without orphaning train entities",
                    chosen, n_valid)
    train_mask = np.zeros(len(tri), dtype=bool)
    train_mask[ko_idx] = True
    train_mask &= ~valid_mask
    train_ents = np.zeros(n_ent, dtype=bool)
    train_ents[tri[train_mask, 0]] = True
    train_ents[tri[train_mask, 2]] = True
    train_rels = np.zeros(len(rels), dtype=bool)
    train_rels[tri[train_mask, 1]] = True

    # original entities with no train fact join the emerging pool
    orphans = [int(e) for e in np.flatnonzero(in_orig & ~train_ents)]
    seen_new = set(discovery)
    rest = [e for e in range(n_ent) if not in_orig[e] and e not in seen_new]
    emerging = [e for e in discovery] + orphans + rest
    emerging = list(dict.fromkeys(emerging))
    chunks = np.array_split(np.asarray(emerging, dtype=np.int64), cfg.num_batches)
    batch_of = np.zeros(n_ent, dtype=np.int64)
    for i, chunk in enumerate(chunks, 1):
        batch_of[chunk] = i

    # each remaining fact belongs to the latest batch it touches
    other = np.flatnonzero(~both)
    fact_batch = np.maximum(batch_of[tri[other, 0]], batch_of[tri[other, 2]]) if len(other) else other
    dropped = 0
    keep = train_rels[tri[other, 1]] if len(other) else np.zeros(0, dtype=bool)
    dropped += int((~keep).sum())
    alive = {int(i): int(bi) for i, bi, k in zip(other, fact_batch, keep) if k}

    # cleaning: discard batch entities without a fact in their own batch, to a fixpoint
    members = [set(int(e) for e in chunk) for chunk in chunks]
    while True:
        has_own = set()
        for i, bi in alive.items():
            h, _, t = tri[i]
            if batch_of[h] == bi:
                has_own.add(int(h))
            if batch_of[t] == bi:
                has_own.add(int(t))
        gone = set()
        for bi, mem in enumerate(members, 1):
            lost = mem - has_own
            gone |= lost
            mem -= lost
        if not gone:
            break
        for i in [i for i in alive if tri[i, 0] in gone or tri[i, 2] in gone]:
            del alive[i]
            dropped += 1

    vocab = Vocabulary()
    for lab in rels:
        if train_rels[ridx[lab]]:
            vocab.intern(lab, "relation")
    vocab.freeze_relations()
    gid: dict[int, int] = {}

    def mk(i: int, prov) -> Fact:
        h, r, t = tri[i]
        for e in (h, t):
            if e not in gid:
                gid[e] = vocab.intern(ents[e], "entity")
        return Fact(gid[h], vocab.relation_id(rels[r]), gid[t], prov)

    train = [mk(i, kg.TRAIN) for i in np.flatnonzero(train_mask)]
    valid = [mk(i, kg.VALID) for i in np.flatnonzero(valid_mask)]
    batches = []
    for bi in range(1, cfg.num_batches + 1):
        idx = sorted(i for i, b in alive.items() if b == bi)
        facts = [mk(i, kg.support(bi)) for i in idx]
        new_ids = {gid[e] for e in members[bi - 1]}
        sup, qry = spanning_split(facts, new_ids)
        qry = [Fact(f.head, f.relation, f.tail, kg.query(bi)) for f in qry]
        batches.append(Batch(sup, qry, new_ids))
    ds = MbeDataset(vocab, train, valid, batches, {gid[e] for e in np.flatnonzero(train_ents)}, dropped)
    problems = validate_mbe(ds)
    if problems:
        raise BuildError("built dataset violates invariants: " + "; ".join(problems[:5]))
    return ds


# ---------------------------------------------------------------------------
# directory I/O
# ---------------------------------------------------------------------------

def _labels(vocab: Vocabulary, facts: Sequence[Fact]):
    return [(vocab.entity_label(f.head), vocab.relation_label(f.relation), vocab.entity_label(f.tail))
            for f in facts]


def write_dataset(ds: MbeDataset, out: str | Path, extra_meta: dict | None = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    kg.write_triples(out / "train.txt", _labels(ds.vocab, ds.train))
    kg.write_triples(out / "valid.txt", _labels(ds.vocab, ds.valid))
    for i, b in enumerate(ds.batches, 1):
        d = out / f"batch_{i}"
        d.mkdir(exist_ok=True)
        kg.write_triples(d / "support.txt", _labels(ds.vocab, b.support))
        kg.write_triples(d / "test.txt", _labels(ds.vocab, b.query))
    meta = ds.stats()
    if extra_meta:
        meta.update(extra_meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(path: str | Path, strict: bool = True, relations: Sequence[str] | None = None) -> MbeDataset:
    """Load the ``train/valid/batch_<i>`` layout.

    Relations are taken from ``train.txt`` (or ``relations`` when given, e.g.
    from a checkpoint) and frozen; with ``strict`` an unseen relation in a
    later file is an error, otherwise it is interned so that
    :func:`validate_mbe` can report it. Batch entity sets are the entities
    that first appear in that batch.
    """
    path = Path(path)
    if not (path / "train.txt").is_file():
        raise DataError(f"{path}: missing train.txt")
    vocab = Vocabulary.from_relations(relations) if relations is not None else Vocabulary()
    train_rows = kg.read_triples(path / "train.txt")
    if relations is None:
        for row in train_rows:
            vocab.intern(row[1], "relation")
        if strict:
            vocab.freeze_relations()
    train = kg.intern_facts(vocab, train_rows, kg.TRAIN, str(path / "train.txt"))
    valid = []
    if (path / "valid.txt").is_file():
        valid = kg.intern_facts(vocab, kg.read_triples(path / "valid.txt"), kg.VALID, str(path / "valid.txt"))
    known = _entities(train) | _entities(valid)
    batches = []
    i = 1
    while (path / f"batch_{i}").is_dir():
        d = path / f"batch_{i}"
        sup_path, qry_path = d / "support.txt", d / "test.txt"
        sup = kg.intern_facts(vocab, kg.read_triples(sup_path), kg.support(i), str(sup_path)) if sup_path.is_file() else []
        qry = kg.intern_facts(vocab, kg.read_triples(qry_path), kg.query(i), str(qry_path)) if qry_path.is_file() else []
        new = (_entities(sup) | _entities(qry)) - known
        known |= new
        batches.append(Batch(sup, qry, new))
        i += 1
    return MbeDataset(vocab, train, valid, batches, _entities(train))


def config_dict(cfg: BuildConfig) -> dict:
    d = asdict(cfg)
    d["split_ratio"] = list(cfg.split_ratio)
    return d
