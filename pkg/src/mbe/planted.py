"""Synthetic expanding KG with one planted chain rule, used for end-to-end checks.

Every entity has exactly one ``r1`` and one ``r2`` out-edge, so
``rq(x) = r2(r1(x))`` is unique. ``r3`` is noise. The last ``n_new``
entities form a single emerging batch: their ``r1``/``r2``/``r3`` facts are
support, their ``rq`` facts are queries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mbe import kg
from mbe.dataset import Batch, MbeDataset
from mbe.kg import Fact, Vocabulary

RELATIONS = ("r1", "r2", "rq", "r3")


@dataclass
class PlantedConfig:
    n_entities: int = 200
    n_new: int = 20
    n_noise: int = 60
    valid_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.n_new < self.n_entities - 2:
            raise ValueError("need 0 < n_new < n_entities - 2")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ValueError("valid_fraction must be in [0, 1)")


def make_planted(cfg: PlantedConfig = PlantedConfig()) -> MbeDataset:
    rng = np.random.default_rng(cfg.seed)
    n, n_orig = cfg.n_entities, cfg.n_entities - cfg.n_new
    vocab = Vocabulary.from_relations(RELATIONS)
    for i in range(n):
        vocab.intern(f"e{i:03d}", "entity")
    r1, r2, rq, r3 = (vocab.relation_id(r) for r in RELATIONS)

    def pick(x: int, hi: int) -> int:
        y = int(rng.integers(hi - 1))
        return y + 1 if y >= x else y

    # originals point r1 at originals so each keeps a training fact; r2 may reach new entities
    f1 = np.array([pick(x, n_orig) if x < n_orig else pick(x, n) for x in range(n)])
    f2 = np.array([pick(x, n) for x in range(n)])
    triples = [(x, r1, int(f1[x])) for x in range(n)]
    triples += [(x, r2, int(f2[x])) for x in range(n)]
    triples += [(x, rq, int(f2[f1[x]])) for x in range(n)]
    noise = set()
    while len(noise) < cfg.n_noise:
        h, t = (int(v) for v in rng.integers(n, size=2))
        if h != t:
            noise.add((h, r3, t))
    triples += sorted(noise)

    is_new = lambda e: e >= n_orig  # noqa: E731
    original = [t for t in triples if not (is_new(t[0]) or is_new(t[2]))]
    emerging = [t for t in triples if is_new(t[0]) or is_new(t[2])]
    rq_orig = [i for i, t in enumerate(original) if t[1] == rq]
    n_valid = int(round(cfg.valid_fraction * len(rq_orig)))
    valid_idx = set(rng.choice(rq_orig, size=n_valid, replace=False).tolist()) if n_valid else set()
    train = [Fact(*t, kg.TRAIN) for i, t in enumerate(original) if i not in valid_idx]
    valid = [Fact(*t, kg.VALID) for i, t in enumerate(original) if i in valid_idx]
    support = [Fact(*t, kg.support(1)) for t in emerging if t[1] != rq]
    query = [Fact(*t, kg.query(1)) for t in emerging if t[1] == rq]
    new = set(range(n_orig, n))
    return MbeDataset(vocab, train, valid, [Batch(support, query, new)], set(range(n_orig)))


def thin_support(ds: MbeDataset, keep: float, seed: int = 0) -> MbeDataset:
    """Keep a random ``keep`` fraction of each batch's support facts.

    A new entity that would lose all of its support keeps one random fact
    of its own, so the dataset stays valid.
    """
    if not 0.0 < keep <= 1.0:
        raise ValueError("keep must be in (0, 1]")
    rng = np.random.default_rng(seed)
    batches = []
    for b in ds.batches:
        sup = list(b.support)
        chosen = rng.random(len(sup)) < keep
        covered = {e for f, c in zip(sup, chosen) if c for e in (f.head, f.tail)}
        for e in sorted(b.entities - covered):
            own = [i for i, f in enumerate(sup) if e in (f.head, f.tail)]
            if own:
                chosen[own[int(rng.integers(len(own)))]] = True
        batches.append(Batch([f for f, c in zip(sup, chosen) if c], list(b.query), set(b.entities)))
    return MbeDataset(ds.vocab, list(ds.train), list(ds.valid), batches, set(ds.original_entities), ds.dropped)
