import numpy as np
import pytest

from mbe import kg
from mbe.kg import Fact, GraphSnapshot, Vocabulary


def make_vocab(relations, n_entities):
    v = Vocabulary.from_relations(relations)
    for i in range(n_entities):
        v.intern(f"e{i}", "entity")
    return v


def make_snapshot(triples, relations=("r0", "r1", "r2"), n_entities=None, prov=kg.TRAIN):
    n = n_entities if n_entities is not None else 1 + max(max(h, t) for h, _, t in triples)
    v = make_vocab(relations, n)
    return GraphSnapshot(v, [Fact(h, r, t, prov) for h, r, t in triples])


def random_triples(rng, n_entities, n_relations, n_facts):
    return [(int(rng.integers(n_entities)), int(rng.integers(n_relations)), int(rng.integers(n_entities)))
            for _ in range(n_facts)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
