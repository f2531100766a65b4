import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbe import kg
from mbe.kg import DataError, Fact, GraphSnapshot, Vocabulary

from conftest import make_snapshot, make_vocab


def test_intern_is_idempotent_and_checks_kind():
    v = Vocabulary()
    a = v.intern("alpha_variant", "entity")
    assert v.intern("alpha_variant", "entity") == a
    with pytest.raises(ValueError):
        v.intern("alpha_variant", "relation")
    with pytest.raises(ValueError):
        v.intern("", "entity")
    with pytest.raises(ValueError):
        v.intern("x", "thing")


def test_relation_layout_allocates_inverse():
    v = Vocabulary.from_relations(["a", "found_in"])
    k = v.relation_id("found_in")
    assert k == 1
    assert v.inverse(k) == k + v.n_base_relations
    assert v.inverse(v.inverse(k)) == k
    assert v.relation_label(v.inverse(k)) == "found_in^-"
    assert v.relation_id("found_in^-") == v.inverse(k)
    assert v.self_loop == 2 * v.n_base_relations
    assert v.start == v.self_loop + 1
    assert v.base_of(v.inverse(k)) == k


def test_frozen_relations_reject_new_labels():
    v = Vocabulary.from_relations(["a"])
    v.freeze_relations()
    with pytest.raises(DataError):
        v.intern("b", "relation")
    for reserved in (kg.SELF_LOOP, kg.START, "x^-"):
        with pytest.raises(ValueError):
            Vocabulary().intern(reserved, "relation")


def test_action_space_order_and_masking():
    # e=0, a=1, b=2 ; facts (e,r1,a), (b,r2,e)
    snap = make_snapshot([(0, 1, 1), (2, 2, 0)])
    v = snap.vocab
    assert snap.action_space(0) == [(1, 1), (v.inverse(2), 2), (v.self_loop, 0)]
    assert snap.action_space(0, mask=Fact(0, 1, 1, kg.TRAIN)) == [(v.inverse(2), 2), (v.self_loop, 0)]
    assert snap.action_space(1, mask=0) == [(v.self_loop, 1)]
    with pytest.raises(KeyError):
        snap.action_space(0, mask=Fact(0, 2, 1, kg.TRAIN))


def test_action_space_unknown_entity():
    snap = make_snapshot([(0, 0, 1)], n_entities=3)
    with pytest.raises(KeyError):
        snap.action_space(2)


def test_masking_removes_one_occurrence_only():
    facts = [Fact(0, 0, 1, kg.TRAIN), Fact(0, 0, 1, kg.AUGMENTED)]
    snap = GraphSnapshot(make_vocab(["r"], 2), facts)
    assert snap.action_space(0, mask=facts[0]) == [(0, 1), (snap.vocab.self_loop, 0)]
    assert snap.action_space(1, mask=0) == [(1, 0), (snap.vocab.self_loop, 1)]
    assert snap.augmented.tolist() == [False, True]


def test_merge_batch_is_pure():
    snap = make_snapshot([(0, 0, 1), (1, 1, 2)], n_entities=4)
    before = snap.digest()
    merged = snap.merge_batch([Fact(3, 2, 0, kg.support(1))])
    assert snap.digest() == before
    assert merged.active_batches == 1 and snap.active_batches == 0
    assert merged.action_space(3) == [(2, 0), (merged.vocab.self_loop, 3)]
    empty = snap.merge_batch([])
    assert empty.active_batches == 1
    assert np.array_equal(empty.heads, snap.heads)
    with pytest.raises(DataError):
        snap.merge_batch([Fact(0, 5, 1, kg.support(1))])


def test_degree_stats_examples():
    snap = make_snapshot([(0, 0, 1), (0, 1, 2), (3, 2, 0)])
    assert snap.degree_stats([0]) == 3.0
    two = make_snapshot([(0, 0, 1)])
    assert two.degree_stats([0, 1]) == 1.0
    with pytest.raises(ValueError):
        snap.degree_stats([])
    with pytest.raises(KeyError):
        snap.degree_stats([9])


def test_action_table_matches_action_space(rng):
    from conftest import random_triples
    snap = make_snapshot(random_triples(rng, 12, 3, 30), n_entities=12)
    rel, ent, ords, valid = snap.action_table()
    for e in snap.entities():
        k = int(valid[e].sum())
        assert list(zip(rel[e, :k].tolist(), ent[e, :k].tolist())) == snap.action_space(int(e))
        assert ords[e, k - 1] == -1
    limited = snap.action_table(limit=2)[3]
    assert limited.sum(axis=1).max() <= 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 2), st.integers(0, 7)), min_size=1, max_size=25))
def test_index_edge_duality(triples):
    snap = make_snapshot(triples, n_entities=8)
    v = snap.vocab
    for h in snap.entities():
        for r, t, _ in snap.out_index(int(h)):
            assert (v.inverse(r), int(h)) in snap.action_space(t)
        for r, hh, _ in snap.in_index(int(h)):
            assert (r, int(h)) in snap.action_space(hh)
    # multiset of non-self-loop actions equals the stored facts in both directions
    acts = sorted(a for e in snap.entities() for a in [(int(e),) + x for x in snap.action_space(int(e))]
                  if a[1] != v.self_loop)
    expect = sorted([(h, r, t) for h, r, t in triples] + [(t, v.inverse(r), h) for h, r, t in triples])
    assert acts == expect
    assert snap.action_space(int(snap.entities()[0])) == snap.action_space(int(snap.entities()[0]))


def test_snapshot_rejects_bad_facts():
    v = make_vocab(["r"], 2)
    with pytest.raises(DataError):
        GraphSnapshot(v, [Fact(0, 1, 1, kg.TRAIN)])
    with pytest.raises(DataError):
        GraphSnapshot(v, [Fact(0, 0, 5, kg.TRAIN)])


def test_read_triples(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# comment\na\tr\tb\n\nc\tr\td\n", encoding="utf-8")
    rows = kg.read_triples(p)
    assert [r[:3] for r in rows] == [("a", "r", "b"), ("c", "r", "d")]
    p.write_text("a\tr\n", encoding="utf-8")
    with pytest.raises(DataError):
        kg.read_triples(p)
