import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbe.agent import TrainConfig, init_params
from mbe.evaluation import (REFERENCE, evaluate, format_table, rank_histogram, sample_negatives,
                            write_report)
from mbe.planted import PlantedConfig, make_planted
from mbe.ranking import AnswerIndex, filtered_rank, metrics, rank_vector
from mbe.rules import RuleStore

from oracles import sort_metrics, sort_rank

SMALL = dict(dim=6, gcn_layers=1, lstm_layers=1, beam_size=8)


def test_rank_examples():
    assert filtered_rank({0: 0.9, 1: 0.5, 2: 0.1}, 0, ()) == 1.0
    assert filtered_rank({0: -np.inf, 1: 0.5, 2: 0.1, 3: -3.0}, 0, ()) == 4.0
    assert filtered_rank({0: 0.5, 1: 0.5, 2: 0.5}, 0, ()) == 2.0
    assert filtered_rank({0: 0.5, 1: 0.9, 2: 0.7}, 0, {1}) == 2.0
    with pytest.raises(KeyError):
        filtered_rank({1: 0.0}, 0, ())


def test_metric_examples():
    assert metrics([1, 2, 4]) == pytest.approx((1 / 3, 0.5833333333333334), abs=1e-12)
    assert metrics([1, 3, 1])[0] == pytest.approx(2 / 3)
    assert metrics([1, 1, 1]) == (1.0, 1.0)
    with pytest.raises(ValueError):
        metrics([])
    with pytest.raises(ValueError):
        metrics([0.5])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([-np.inf, -2.0, -1.0, 0.0, 0.5, 1.0, 3.0]), min_size=1, max_size=20),
       st.data())
def test_rank_matches_sort_oracle(vals, data):
    scores = dict(enumerate(vals))
    gold = data.draw(st.integers(0, len(vals) - 1))
    known = set(data.draw(st.lists(st.integers(0, len(vals) - 1), max_size=5))) - {gold}
    r = filtered_rank(scores, gold, known)
    assert abs(r - sort_rank(scores, gold, known)) < 1e-12
    vec = np.array(vals)
    assert rank_vector(vec, np.arange(len(vals)), gold, known) == r


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1, 1000), min_size=1, max_size=50))
def test_metrics_match_naive(ranks):
    got, want = metrics(ranks), sort_metrics(ranks)
    assert abs(got[0] - want[0]) < 1e-12 and abs(got[1] - want[1]) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=15), st.floats(0, 10))
def test_filtering_soundness(vals, boost):
    scores = dict(enumerate(vals))
    gold = 0
    before = filtered_rank(scores, gold, {1})
    scores[1] = vals[0] + boost + 1.0
    assert filtered_rank(scores, gold, {1}) == before


def test_answer_index():
    from mbe import kg
    from mbe.kg import Fact
    idx = AnswerIndex([Fact(0, 1, 2, kg.TRAIN), Fact(0, 1, 3, kg.VALID), Fact(0, 2, 4, kg.TRAIN)])
    assert idx.known_except(0, 1, 2) == {3}
    assert idx.answers(5, 1) == set()


def test_sample_negatives_excludes_answers():
    rng = np.random.default_rng(0)
    cand = np.arange(500)
    neg = sample_negatives(rng, cand, 7, {1, 2, 3})
    assert len(neg) == 100 and len(set(neg.tolist())) == 100
    assert not {1, 2, 3, 7} & set(neg.tolist())
    small = sample_negatives(rng, np.arange(10), 7, {1})
    assert sorted(small.tolist()) == [0, 2, 3, 4, 5, 6, 8, 9]


@pytest.fixture(scope="module")
def tiny_model():
    ds = make_planted(PlantedConfig(n_entities=60, n_new=8, n_noise=10, seed=1))
    cfg = TrainConfig(**SMALL)
    params = init_params(ds.vocab.n_relations, cfg, np.random.default_rng(0))
    return ds, cfg, params


def test_sample100_rank_never_exceeds_all_rank(tiny_model):
    ds, cfg, params = tiny_model
    full = evaluate(params, cfg, ds, RuleStore(), "all")
    sampled = evaluate(params, cfg, ds, RuleStore(), "sample100", seed=3)
    for a, s in zip(full.ranks[1], sampled.ranks[1]):
        assert s <= a
    again = evaluate(params, cfg, ds, RuleStore(), "sample100", seed=3)
    assert again.ranks == sampled.ranks and again.seed == 3 and full.seed is None


def test_evaluate_errors(tiny_model):
    ds, cfg, params = tiny_model
    with pytest.raises(IndexError):
        evaluate(params, cfg, ds, RuleStore(), batches=[2])
    with pytest.raises(ValueError):
        evaluate(params, cfg, ds, RuleStore(), "top10")


def test_report_and_table(tiny_model, tmp_path):
    ds, cfg, params = tiny_model
    run = evaluate(params, cfg, ds, RuleStore(), "all")
    text = format_table(run)
    assert "Hits@1" in text and "MRR" in text and "b1" in text
    report = write_report(run, tmp_path / "r.json", {"seed": 0}, "ab" * 32)
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded == report
    assert loaded["reference"] == REFERENCE
    row = loaded["batches"][0]
    assert row["queries"] == len(ds.batches[0].query)
    assert sum(row["histogram"].values()) == row["queries"]
    assert 0 <= row["hits1"] <= 1 and 0 < row["mrr"] <= 1


def test_rank_histogram_bins():
    h = rank_histogram([1, 2, 3.5, 10, 10.5, 100, 101, 1000])
    # tie half-ranks fall into the bin below the next integer
    assert h == {"1": 1, "2-3": 2, "4-10": 2, "11-100": 1, ">100": 2}
