"""Per-batch filtered evaluation of tail prediction, 1-vs-all and 1-vs-100."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from mbe.agent import Query, TrainConfig, answer_queries, working_graph
from mbe.dataset import MbeDataset
from mbe.numerics.nn import ParamSet
from mbe.ranking import AnswerIndex, filtered_rank, metrics, rank_vector
from mbe.rules import RuleStore

__all__ = ["EvalRun", "evaluate", "filtered_rank", "metrics", "write_report", "format_table"]

SETTINGS = ("all", "sample100")
N_NEGATIVES = 100

# full-scale reference point for WN-MBE batch 1 (Hits@1, MRR in percent); reported, never asserted
REFERENCE = {"dataset": "WN-MBE", "batch": 1, "hits1": 84.5, "mrr": 86.6}


@dataclass
class EvalRun:
    setting: str
    seed: int | None
    ranks: dict[int, list[float]] = field(default_factory=dict)

    def batch_metrics(self, batch: int) -> tuple[float, float]:
        return metrics(self.ranks[batch])

    def table(self) -> list[dict]:
        rows = []
        for b in sorted(self.ranks):
            h1, mrr = metrics(self.ranks[b])
            rows.append({"batch": b, "queries": len(self.ranks[b]), "hits1": h1, "mrr": mrr})
        return rows


def sample_negatives(rng: np.random.Generator, candidates: np.ndarray, gold: int, known: set[int],
                     k: int = N_NEGATIVES) -> np.ndarray:
    skip = np.fromiter(known | {gold}, dtype=np.int64)
    pool = candidates[~np.isin(candidates, skip)]
    if len(pool) <= k:
        return pool
    return np.sort(rng.choice(pool, size=k, replace=False))


def evaluate(params: ParamSet, cfg: TrainConfig, ds: MbeDataset, rules: RuleStore, setting: str = "all",
             seed: int = 0, batches: list[int] | None = None, beam_size: int | None = None,
             workers: int = 1) -> EvalRun:
    """Rank every query of each requested batch against the graph visible at that batch.

    The graph is train + valid + supports 1..i plus rule-derived facts;
    filtering uses every fact visible at batch i (queries included);
    candidates are the entities present in that graph.
    """
    if setting not in SETTINGS:
        raise ValueError(f"setting must be one of {SETTINGS}")
    todo = list(range(1, ds.num_batches + 1)) if batches is None else list(batches)
    for i in todo:
        if not 1 <= i <= ds.num_batches:
            raise IndexError(f"batch index {i} out of range 1..{ds.num_batches}")
    run = EvalRun(setting, seed if setting == "sample100" else None)
    for i in todo:
        base = ds.snapshot(i)
        work = working_graph(base, rules, cfg)
        index = AnswerIndex(ds.visible_facts(i))
        candidates = base.entities()
        queries = [Query(f.head, f.relation, f.tail) for f in ds.batches[i - 1].query]
        results = answer_queries(work, params, queries, cfg, beam_size, workers=workers)
        rng = np.random.default_rng([seed, i])
        ranks = []
        n = base.n_entities
        for q, res in zip(queries, results):
            known = index.known_except(q.source, q.relation, q.target)
            scores = res.score_vector(n)
            if setting == "all":
                ranks.append(rank_vector(scores, candidates, q.target, known))
            else:
                neg = sample_negatives(rng, candidates, q.target, known)
                ranks.append(rank_vector(scores, np.append(neg, q.target), q.target, ()))
        run.ranks[i] = ranks
    return run


def rank_histogram(ranks: list[float]) -> dict[str, int]:
    edges = [(1, 1), (2, 3), (4, 10), (11, 100)]
    out = {}
    r = np.asarray(ranks)
    for lo, hi in edges:
        out[f"{lo}" if lo == hi else f"{lo}-{hi}"] = int(np.count_nonzero((r >= lo) & (r < hi + 1)))
    out[">100"] = int(np.count_nonzero(r >= 101))
    return out


def format_table(run: EvalRun) -> str:
    """Text table with one column per batch, rows Hits@1 and MRR in percent."""
    rows = run.table()
    head = "metric  " + "".join(f"{'b' + str(r['batch']):>8}" for r in rows)
    h1 = "Hits@1  " + "".join(f"{100 * r['hits1']:8.1f}" for r in rows)
    mrr = "MRR     " + "".join(f"{100 * r['mrr']:8.1f}" for r in rows)
    return "\n".join([f"setting={run.setting}", head, h1, mrr])


def write_report(run: EvalRun, path: str | Path, config: dict, checkpoint_hash: str | None) -> dict:
    report = {
        "setting": run.setting,
        "seed": run.seed,
        "reference": REFERENCE,
        "batches": [dict(row, histogram=rank_histogram(run.ranks[row["batch"]])) for row in run.table()],
        "config": config,
        "checkpoint_sha256": checkpoint_hash,
    }
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
