"""Independent reference implementations used by the tests."""
import itertools

import numpy as np


def path_enumeration_augment(triples, n_base, trusted):
    """All (h, rq, t) reachable by enumerating every edge path for every rule body.

    ``triples`` are (h, r, t) base facts. Edges are walked one by one, so
    duplicate facts yield duplicate paths; the output is the set of distinct
    endpoints per (h, rq) candidate pair, as a sorted list of triples.
    """
    edges = [(h, r, t) for h, r, t in triples] + [(t, r + n_base, h) for h, r, t in triples]
    heads = {(h, r) for h, r, _ in triples}
    out = set()
    for h, rq in heads:
        for body in trusted.get(rq, ()):
            def walk(e, depth):
                if depth == len(body):
                    out.add((h, rq, e))
                    return
                for a, r, b in edges:
                    if a == e and r == body[depth]:
                        walk(b, depth + 1)
            walk(h, 0)
    return sorted(out)


def sort_rank(scores, gold, known):
    """1-based expected rank of ``gold`` among candidates, by explicit sorting."""
    items = [(e, s) for e, s in scores.items() if e == gold or e not in known]
    ordered = sorted(items, key=lambda kv: -kv[1])
    gs = scores[gold]
    positions = [i + 1 for i, (e, s) in enumerate(ordered) if s == gs]
    return float(np.mean(positions))


def sort_metrics(ranks):
    return sum(1 for r in ranks if r <= 1) / len(ranks), sum(1 / r for r in ranks) / len(ranks)


def brute_force_paths(action_space, start, steps):
    """Every relation/entity sequence of ``steps`` actions from ``start``."""
    paths = [((), (), start)]
    for _ in range(steps):
        nxt = []
        for rels, ents, e in paths:
            for r, e2 in action_space(e):
                nxt.append((rels + (r,), ents + (e2,), e2))
        paths = nxt
    return paths


def product_space(*sizes):
    return list(itertools.product(*[range(s) for s in sizes]))
