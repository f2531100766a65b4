"""Relation-only entity encoder with stacked relational convolutions and rule feedback attention.

Entities carry no parameters: an entity's base embedding is a function of
the relations on its incident facts, and the convolution layers refine it
with neighbour messages ``u_neighbour * u_relation``. Every aggregation
term is weighted by ``alpha[r | query_relation]``, derived from the rule
store.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from mbe.kg import GraphSnapshot, Vocabulary
from mbe.numerics import tensor as T
from mbe.numerics.nn import ParamSet, xavier_init
from mbe.numerics.tensor import Tensor
from mbe.rules import RuleStore, confidence

# largest double below 1, so that alpha = 1 - lambda stays strictly positive
_LAMBDA_MAX = float(np.nextafter(1.0, 0.0))


@dataclass
class AttentionTable:
    """alpha[query_relation] is a vector over base relations; missing rows mean all ones."""

    n_base: int
    alpha: dict[int, np.ndarray] = field(default_factory=dict)
    reliability: dict[int, float] = field(default_factory=dict)

    def weights(self, query_relation: int) -> np.ndarray:
        row = self.alpha.get(query_relation)
        return np.ones(self.n_base) if row is None else row

    def get(self, query_relation: int, relation: int) -> float:
        return float(self.weights(query_relation)[relation])

    def __len__(self) -> int:
        return len(self.alpha)


def compute_attention(rules: RuleStore, epsilon: float, vocab: Vocabulary) -> AttentionTable:
    """Feedback attention from rule confidences.

    corr(rq, r) is the best confidence among rq's rules whose body uses r in
    either direction; reliability lambda = tanh(sum of positive counts /
    epsilon); alpha = lambda * corr + (1 - lambda).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n_base = vocab.n_base_relations
    table = AttentionTable(n_base)
    for rq in rules.query_relations():
        keys = rules.rules_for(rq)
        corr = np.zeros(n_base)
        total = 0
        for key in keys:
            st = rules[key]
            total += st.pos
            c = confidence(st)
            for r in set(key.body):
                if r < 2 * n_base:
                    b = vocab.base_of(r)
                    corr[b] = max(corr[b], c)
        lam = min(math.tanh(total / epsilon), _LAMBDA_MAX)
        table.alpha[rq] = lam * corr + (1.0 - lam)
        table.reliability[rq] = lam
    return table


def export_attention(table: AttentionTable, vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_relation", "relation", "alpha"])
        for rq in sorted(table.alpha):
            for r, a in enumerate(table.alpha[rq]):
                w.writerow([vocab.relation_label(rq), vocab.relation_label(r), repr(float(a))])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_encoder(params: ParamSet, n_relations: int, dim: int, layers: int, rng: np.random.Generator) -> None:
    if layers < 1:
        raise ValueError("the encoder needs at least one convolution layer")
    params.add("rel_emb", xavier_init((n_relations, dim), rng))
    params.add("base.w_in", xavier_init((dim, dim), rng))
    params.add("base.w_out", xavier_init((dim, dim), rng))
    for layer in range(layers):
        for name in ("w_in", "w_out", "w_self", "w_rel"):
            params.add(f"conv.{layer}.{name}", xavier_init((dim, dim), rng))


def encoder_layers(params: ParamSet) -> int:
    n = 0
    while f"conv.{n}.w_in" in params:
        n += 1
    return n


# ---------------------------------------------------------------------------
# graph operators
# ---------------------------------------------------------------------------

class GraphOperators:
    """Sparse aggregation matrices for one snapshot, built once and reweighted per query relation."""

    def __init__(self, snapshot: GraphSnapshot, degree_norm: bool = False):
        self.snapshot = snapshot
        self.n = snapshot.n_entities
        self.n_base = snapshot.vocab.n_base_relations
        self.heads = np.asarray(snapshot.heads)
        self.tails = np.asarray(snapshot.tails)
        self.rels = np.asarray(snapshot.relations)
        self.degree_norm = degree_norm
        self._cache: dict = {}

    def matrices(self, alpha: np.ndarray | None):
        """(C_in, C_out, S_in, S_out) for fact weights ``alpha[rel]`` (None = unweighted)."""
        key = None if alpha is None else alpha.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        f = len(self.rels)
        w = np.ones(f) if alpha is None else alpha[self.rels]
        if self.degree_norm:
            deg = np.maximum(np.asarray(self.snapshot.degree, dtype=np.float64), 1.0)
            w_in, w_out = w / deg[self.tails], w / deg[self.heads]
        else:
            w_in = w_out = w
        fid = np.arange(f)
        shape_r = (self.n, self.n_base)
        shape_f = (self.n, f)
        c_in = sp.csr_matrix((w_in, (self.tails, self.rels)), shape=shape_r)
        c_out = sp.csr_matrix((w_out, (self.heads, self.rels)), shape=shape_r)
        s_in = sp.csr_matrix((w_in, (self.tails, fid)), shape=shape_f)
        s_out = sp.csr_matrix((w_out, (self.heads, fid)), shape=shape_f)
        out = (c_in, c_out, s_in, s_out)
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = out
        return out


def _alpha_for(attn: AttentionTable | None, query_relation: int, n_base: int) -> np.ndarray | None:
    if attn is None:
        return None
    if not 0 <= query_relation < n_base:
        raise KeyError(f"unknown query relation {query_relation}")
    return attn.weights(query_relation)


def base_embeddings(ops: GraphOperators, params: ParamSet, attn: AttentionTable | None,
                    query_relation: int) -> Tensor:
    """u_b[e] = tanh(sum_in alpha W_in z_r + sum_out alpha W_out z_r); shape (N, d)."""
    alpha = _alpha_for(attn, query_relation, ops.n_base)
    c_in, c_out, _, _ = ops.matrices(alpha)
    z_base = T.gather_rows(params["rel_emb"], np.arange(ops.n_base))
    msg_in = T.spmm(c_in, T.linear(z_base, params["base.w_in"]))
    msg_out = T.spmm(c_out, T.linear(z_base, params["base.w_out"]))
    return T.tanh(T.add(msg_in, msg_out))


def conv_forward(ops: GraphOperators, params: ParamSet, attn: AttentionTable | None,
                 query_relation: int, u0: Tensor | None = None,
                 z0: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Run every convolution layer; returns final (entity, relation) embeddings."""
    alpha = _alpha_for(attn, query_relation, ops.n_base)
    _, _, s_in, s_out = ops.matrices(alpha)
    u = base_embeddings(ops, params, attn, query_relation) if u0 is None else u0
    z = params["rel_emb"] if z0 is None else z0
    layers = encoder_layers(params)
    if layers < 1:
        raise ValueError("the encoder needs at least one convolution layer")
    for layer in range(layers):
        p = f"conv.{layer}"
        z_fact = T.gather_rows(z, ops.rels)
        from_head = T.elementwise_mul(T.gather_rows(u, ops.heads), z_fact)
        from_tail = T.elementwise_mul(T.gather_rows(u, ops.tails), z_fact)
        agg_in = T.spmm(s_in, from_head)
        agg_out = T.spmm(s_out, from_tail)
        pre = T.add(T.add(T.linear(u, params[f"{p}.w_self"]), T.linear(agg_in, params[f"{p}.w_in"])),
                    T.linear(agg_out, params[f"{p}.w_out"]))
        u = T.tanh(pre)
        z = T.linear(z, params[f"{p}.w_rel"])
    return u, z


def encode(ops: GraphOperators, params: ParamSet, attn: AttentionTable | None,
           query_relation: int) -> tuple[Tensor, Tensor]:
    return conv_forward(ops, params, attn, query_relation)


class EmbeddingCache:
    """Final embeddings per query relation for one (snapshot, params, attention) state.

    Any change to those inputs requires a fresh cache; :meth:`matches`
    checks the tokens so callers can detect staleness.
    """

    def __init__(self, ops: GraphOperators, params: ParamSet, attn: AttentionTable | None,
                 token: tuple = ()):
        self.ops = ops
        self.params = params
        self.attn = attn
        self.token = token
        self.passes = 0
        self._emb: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, query_relation: int) -> tuple[np.ndarray, np.ndarray]:
        hit = self._emb.get(query_relation)
        if hit is None:
            u, z = encode(self.ops, self.params, self.attn, query_relation)
            self.passes += 1
            hit = self._emb[query_relation] = (u.data, z.data)
        return hit

    def matches(self, token: tuple) -> bool:
        return token == self.token

    def sync(self, token: tuple) -> None:
        """Drop every cached embedding if the (snapshot, rules, params) token moved."""
        if token != self.token:
            self._emb.clear()
            self.token = token


def encode_for_queries(ops: GraphOperators, params: ParamSet, attn: AttentionTable | None,
                       query_relations) -> EmbeddingCache:
    """One encoder pass per distinct query relation."""
    cache = EmbeddingCache(ops, params, attn)
    for rq in dict.fromkeys(int(r) for r in query_relations):
        cache.get(rq)
    return cache
