"""Walking agent: LSTM policy over the action table, REINFORCE training and beam search."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from mbe.dataset import MbeDataset
from mbe.encoder import AttentionTable, GraphOperators, compute_attention, encode, init_encoder
from mbe.kg import DataError, Fact, GraphSnapshot, Vocabulary
from mbe.numerics import tensor as T
from mbe.numerics.nn import Adam, ParamSet, init_lstm, lstm_step, lstm_zero_state, select_state, xavier_init
from mbe.numerics.tensor import NonFiniteError, Tape, Tensor
from mbe.ranking import AnswerIndex, metrics, rank_vector
from mbe.rules import RuleKey, RuleStore, augment, record_trajectory, trustworthy_rules


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient showed up during training."""


@dataclass
class TrainConfig:
    max_steps: int = 3
    beam_size: int = 128
    action_dropout: float = 0.1
    lr: float = 1e-3
    epochs: int = 100
    rollouts_per_query: int = 8
    batch_size: int = 128
    min_conf: float = 0.8
    min_support: int = 3
    epsilon: float = 1000.0
    rng_seed: int = 0
    dim: int = 100
    gcn_layers: int = 2
    lstm_layers: int = 3
    max_actions: int | None = 256
    max_new_per_pair: int | None = 50
    augmentation: bool = True
    attention: bool = True
    candidate_mode: str = "fact"
    baseline: bool = False
    baseline_decay: float = 0.9
    degree_norm: bool = False
    valid_max_queries: int | None = None

    def __post_init__(self):
        if self.max_steps not in (3, 4, 5):
            raise ValueError("max_steps must be 3, 4 or 5")
        if not 0.0 <= self.action_dropout < 1.0:
            raise ValueError("action_dropout must be in [0, 1)")
        if self.gcn_layers not in (1, 2, 3):
            raise ValueError("gcn_layers must be 1, 2 or 3")
        for name in ("beam_size", "rollouts_per_query", "batch_size", "dim", "lstm_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.epsilon <= 0:
            raise ValueError("lr and epsilon must be positive")
        if not 0.0 <= self.min_conf <= 1.0 or self.min_support < 1:
            raise ValueError("min_conf must be in [0,1] and min_support >= 1")
        if self.max_actions is not None and self.max_actions < 1:
            raise ValueError("max_actions must be >= 1 or null")
        if self.max_new_per_pair is not None and self.max_new_per_pair < 1:
            raise ValueError("max_new_per_pair must be >= 1 or null")
        if self.candidate_mode not in ("fact", "incident"):
            raise ValueError("candidate_mode must be 'fact' or 'incident'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Query:
    source: int
    relation: int
    target: int | None = None


# ---------------------------------------------------------------------------
# parameters and policy
# ---------------------------------------------------------------------------

def init_params(n_relations: int, cfg: TrainConfig, rng: np.random.Generator) -> ParamSet:
    d = cfg.dim
    params = ParamSet()
    init_encoder(params, n_relations, d, cfg.gcn_layers, rng)
    init_lstm(params, "lstm", 2 * d, 2 * d, cfg.lstm_layers, rng)
    params.add("fc1", xavier_init((2 * d, 4 * d), rng))
    params.add("fc2", xavier_init((2 * d, 2 * d), rng))
    return params


def _lstm_layers(params: ParamSet) -> int:
    n = 0
    while f"lstm.{n}.w_ih" in params:
        n += 1
    return n


def start_state(params: ParamSet, u: Tensor, z: Tensor, sources: np.ndarray, start_rel: int):
    """h_0 = LSTM(0, [z_start; u_source])."""
    b = len(sources)
    hidden = params["lstm.0.w_hh"].shape[1]
    state = lstm_zero_state(b, hidden, _lstm_layers(params))
    x = T.concat([T.gather_rows(z, np.full(b, start_rel)), T.gather_rows(u, sources)], axis=1)
    return lstm_step(params, "lstm", state, x)


def advance(params: ParamSet, u: Tensor, z: Tensor, state, rels: np.ndarray, ents: np.ndarray):
    x = T.concat([T.gather_rows(z, rels), T.gather_rows(u, ents)], axis=1)
    return lstm_step(params, "lstm", state, x)


def action_logits(params: ParamSet, u: Tensor, z: Tensor, query_relation: int, current: np.ndarray,
                  h_top: Tensor, rel: np.ndarray, ent: np.ndarray) -> Tensor:
    """logits[b, k] = [z_r; u_e'] . W_fc2 relu(W_fc1 [u_cur; z_rq; h]) for the (B, K) action grid."""
    b, k = rel.shape
    state = T.concat([T.gather_rows(u, current), T.gather_rows(z, np.full(b, query_relation)), h_top], axis=1)
    v = T.linear(T.relu(T.linear(state, params["fc1"])), params["fc2"])
    acts = T.concat([T.gather_rows(z, rel.ravel()), T.gather_rows(u, ent.ravel())], axis=1)
    return T.reshape(T.rowdot(acts, T.gather_rows(v, np.repeat(np.arange(b), k))), (b, k))


def policy_forward(params: ParamSet, u: Tensor, z: Tensor, query_relation: int, current: np.ndarray,
                   h_top: Tensor, rel: np.ndarray, ent: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Action probabilities (B, K); masked entries are exactly 0."""
    logits = action_logits(params, u, z, query_relation, current, h_top, rel, ent)
    return T.softmax(Tensor(logits.data), mask).data


def _masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    zz = np.where(mask, logits, -np.inf)
    m = zz.max(axis=1, keepdims=True)
    return zz - m - np.log(np.exp(zz - m).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class Rollouts:
    relations: np.ndarray       # (B, steps)
    entities: np.ndarray        # (B, steps + 1), column 0 is the source
    log_prob: Tensor            # (B,) summed over steps

    @property
    def final(self) -> np.ndarray:
        return self.entities[:, -1]


def gold_ordinals(snapshot: GraphSnapshot, queries: Sequence[Query]) -> np.ndarray:
    """(B, G) ordinals of the non-augmented occurrences of each query's own fact; -2 pads."""
    rows = []
    for q in queries:
        ords = [o for r, t, o in snapshot.out_index(q.source)
                if r == q.relation and t == q.target and not snapshot.augmented[o]] if snapshot.has_entity(q.source) else []
        rows.append(ords)
    g = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), max(g, 1)), -2, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def rollout(snapshot: GraphSnapshot, params: ParamSet, emb: tuple[Tensor, Tensor], queries: Sequence[Query],
            steps: int, *, mode: str = "sample", mask_gold: bool = False, dropout: float = 0.0,
            rng: np.random.Generator | None = None, limit: int | None = 256,
            masked: np.ndarray | None = None) -> Rollouts:
    """Walk ``steps`` transitions for a batch of queries sharing one relation.

    ``mask_gold`` hides every non-augmented occurrence of (source, relation,
    target) in both directions at every step; ``masked`` overrides it with
    explicit per-row ordinals. Dropout applies to sampling only.
    """
    if mode not in ("sample", "greedy"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    if not queries:
        raise ValueError("rollout needs at least one query")
    rq = queries[0].relation
    if any(q.relation != rq for q in queries):
        raise ValueError("rollout batches must share one query relation")
    for q in queries:
        if not snapshot.has_entity(q.source):
            raise KeyError(f"query source {q.source} is not in the snapshot")
    if mode == "sample" and rng is None:
        raise ValueError("sampling needs an rng")
    vocab = snapshot.vocab
    u, z = emb
    rel_t, ent_t, ord_t, valid_t = snapshot.action_table(limit)
    if masked is None and mask_gold:
        masked = gold_ordinals(snapshot, queries)
    cur = np.array([q.source for q in queries], dtype=np.int64)
    b = len(cur)
    state, h = start_state(params, u, z, cur, vocab.start)
    rels = np.empty((b, steps), dtype=np.int64)
    ents = np.empty((b, steps + 1), dtype=np.int64)
    ents[:, 0] = cur
    log_prob = None
    rows = np.arange(b)
    for t in range(steps):
        rel, ent, ords, mask = rel_t[cur], ent_t[cur], ord_t[cur], valid_t[cur]
        if masked is not None:
            mask = mask & ~(ords[:, :, None] == masked[:, None, :]).any(axis=2)
        self_loop = mask & (ords == -1)
        if mode == "sample" and dropout > 0:
            mask = mask & ((rng.random(mask.shape) >= dropout) | self_loop)
        logits = action_logits(params, u, z, rq, cur, h, rel, ent)
        if mode == "greedy":
            choice = np.argmax(np.where(mask, logits.data, -np.inf), axis=1)
        else:
            p = np.exp(_masked_log_softmax(logits.data, mask))
            cdf = np.cumsum(p, axis=1)
            draw = rng.random(b)[:, None] * cdf[:, -1:]
            choice = np.minimum((cdf <= draw).sum(axis=1), mask.shape[1] - 1)
            # guard against landing on a zero-probability column through rounding
            bad = ~mask[rows, choice]
            if bad.any():
                choice[bad] = np.argmax(np.where(mask[bad], p[bad], -1.0), axis=1)
        lp = T.log_softmax_pick(logits, mask, choice)
        log_prob = lp if log_prob is None else T.add(log_prob, lp)
        r_next, e_next = rel[rows, choice], ent[rows, choice]
        rels[:, t] = r_next
        ents[:, t + 1] = e_next
        if t + 1 < steps:
            state, h = advance(params, u, z, state, r_next, e_next)
        cur = e_next
    return Rollouts(rels, ents, log_prob)


def terminal_reward(final_entities: np.ndarray, queries: Sequence[Query],
                    answers: AnswerIndex | None = None) -> np.ndarray:
    """1.0 where (source, relation, final) is a known fact, else 0.0.

    With ``answers`` the known facts are that index (the training graph);
    without it only the query's own target counts.
    """
    if any(q.target is None for q in queries):
        raise ValueError("terminal_reward needs queries with targets")
    final = np.asarray(final_entities)
    if answers is None:
        targets = np.array([q.target for q in queries], dtype=np.int64)
        return (final == targets).astype(np.float64)
    return np.array([float(int(e) in answers.answers(q.source, q.relation)) for e, q in zip(final, queries)])


def reinforce_loss(log_prob: Tensor, advantage: np.ndarray) -> Tensor:
    """-(1/B) sum_b A_b * sum_t log pi(a_t | s_t)."""
    return T.scale(T.dot(log_prob, np.asarray(advantage, dtype=np.float64)), -1.0 / log_prob.shape[0])


# ---------------------------------------------------------------------------
# beam search
# ---------------------------------------------------------------------------

@dataclass
class BeamResult:
    query: Query
    scores: dict[int, float]                            # entity -> best trajectory log-probability
    trajectories: list[tuple[tuple[int, ...], tuple[int, ...], float]] = field(default_factory=list)

    def score_vector(self, n_entities: int) -> np.ndarray:
        out = np.full(n_entities, -np.inf)
        for e, s in self.scores.items():
            out[e] = s
        return out


def beam_search(snapshot: GraphSnapshot, params: ParamSet, emb: tuple[Tensor, Tensor],
                queries: Sequence[Query], steps: int, beam_size: int,
                limit: int | None = 256, keep_trajectories: int = 0) -> list[BeamResult]:
    """Width-``beam_size`` search for queries sharing one relation; no dropout, no masking."""
    if not queries:
        return []
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    rq = queries[0].relation
    if any(q.relation != rq for q in queries):
        raise ValueError("beam batches must share one query relation")
    for q in queries:
        if not snapshot.has_entity(q.source):
            raise KeyError(f"query source {q.source} is not in the snapshot")
    u, z = emb
    rel_t, ent_t, _, valid_t = snapshot.action_table(limit)
    n_q = len(queries)
    cur = np.array([q.source for q in queries], dtype=np.int64)
    state, h = start_state(params, u, z, cur, snapshot.vocab.start)
    width = 1
    logp = np.zeros((n_q, 1))
    hist_r = np.zeros((n_q, 1, 0), dtype=np.int64)
    hist_e = cur.reshape(n_q, 1, 1)
    for t in range(steps):
        rel, ent, mask = rel_t[cur], ent_t[cur], valid_t[cur]
        k = rel.shape[1]
        logits = action_logits(params, u, z, rq, cur, h, rel, ent).data
        cand = (logp.reshape(-1, 1) + _masked_log_softmax(logits, mask)).reshape(n_q, width * k)
        new_width = min(beam_size, width * k)
        order = np.argsort(-cand, axis=1, kind="stable")[:, :new_width]
        logp = np.take_along_axis(cand, order, axis=1)
        parent_local, col = order // k, order % k
        parent = (parent_local + (np.arange(n_q) * width)[:, None]).ravel()
        col = col.ravel()
        r_next, e_next = rel[parent, col], ent[parent, col]
        hist_r = np.concatenate([hist_r.reshape(n_q * width, t)[parent],
                                 r_next[:, None]], axis=1).reshape(n_q, new_width, t + 1)
        hist_e = np.concatenate([hist_e.reshape(n_q * width, t + 1)[parent],
                                 e_next[:, None]], axis=1).reshape(n_q, new_width, t + 2)
        width = new_width
        if t + 1 < steps:
            state, h = advance(params, u, z, select_state(state, parent), r_next, e_next)
        cur = e_next
    out = []
    for qi, q in enumerate(queries):
        scores: dict[int, float] = {}
        trajs = []
        for j in range(width):
            s = float(logp[qi, j])
            if s == -np.inf:
                continue
            e = int(hist_e[qi, j, -1])
            if s > scores.get(e, -np.inf):
                scores[e] = s
            if len(trajs) < keep_trajectories:
                trajs.append((tuple(int(r) for r in hist_r[qi, j]), tuple(int(x) for x in hist_e[qi, j, 1:]), s))
        out.append(BeamResult(q, scores, trajs))
    return out


def format_trajectory(vocab: Vocabulary, rels: Sequence[int], ents: Sequence[int], log_score: float) -> str:
    hops = " → ".join(f"({vocab.relation_label(r)}, {vocab.entity_label(e)})" for r, e in zip(rels, ents))
    return f"{hops}  score={float(np.exp(log_score)):.6g}"


# ---------------------------------------------------------------------------
# working graph for one rule-store state
# ---------------------------------------------------------------------------

def trusted_for_augmentation(rules: RuleStore, cfg: TrainConfig) -> dict[int, list[RuleKey]]:
    """Trustworthy rules minus the trivial ``r <= r``, which would only copy existing facts."""
    out = {}
    for rq, keys in trustworthy_rules(rules, cfg.min_conf, cfg.min_support).items():
        keep = [k for k in keys if k.body != (rq,)]
        if keep:
            out[rq] = keep
    return out


@dataclass
class WorkingGraph:
    snapshot: GraphSnapshot
    augmented: list[Fact]
    ops: GraphOperators
    attention: AttentionTable | None


def working_graph(base: GraphSnapshot, rules: RuleStore, cfg: TrainConfig) -> WorkingGraph:
    aug: list[Fact] = []
    if cfg.augmentation and len(rules):
        aug = augment(base, trusted_for_augmentation(rules, cfg), cfg.max_new_per_pair, cfg.candidate_mode)
    snap = base.with_facts(aug) if aug else base
    attn = compute_attention(rules, cfg.epsilon, base.vocab) if cfg.attention else None
    return WorkingGraph(snap, aug, GraphOperators(snap, cfg.degree_norm), attn)


def answer_queries(work: WorkingGraph, params: ParamSet, queries: Sequence[Query], cfg: TrainConfig,
                   beam_size: int | None = None, keep_trajectories: int = 0,
                   chunk: int = 64, workers: int = 1) -> list[BeamResult]:
    """Beam answers in input order; one encoder pass per distinct query relation.

    Relation groups are independent, so ``workers > 1`` answers them on a
    thread pool; results are placed by index and do not depend on timing.
    """
    beam = cfg.beam_size if beam_size is None else beam_size
    out: list[BeamResult | None] = [None] * len(queries)
    groups: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        groups.setdefault(q.relation, []).append(i)

    def run(item):
        rq, idx = item
        u, z = encode(work.ops, params, work.attention, rq)
        emb = (Tensor(u.data), Tensor(z.data))
        for s in range(0, len(idx), chunk):
            part = idx[s:s + chunk]
            res = beam_search(work.snapshot, params, emb, [queries[i] for i in part], cfg.max_steps,
                              beam, cfg.max_actions, keep_trajectories)
            for i, r in zip(part, res):
                out[i] = r

    if workers > 1 and len(groups) > 1:
        work.snapshot.action_table(cfg.max_actions)  # build the shared table once, before fan-out
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, groups.items()))
    else:
        for item in groups.items():
            run(item)
    return out  # type: ignore[return-value]


def beam_answer(work: WorkingGraph, params: ParamSet, query: Query, beam_size: int,
                cfg: TrainConfig, keep_trajectories: int = 0) -> BeamResult:
    if not work.snapshot.has_entity(query.source):
        raise KeyError(f"unknown source entity {query.source}")
    return answer_queries(work, params, [query], cfg, beam_size, keep_trajectories)[0]


def ranked_mrr(work: WorkingGraph, params: ParamSet, facts: Sequence[Fact], index: AnswerIndex,
               candidates: np.ndarray, cfg: TrainConfig) -> tuple[float, float]:
    queries = [Query(f.head, f.relation, f.tail) for f in facts]
    results = answer_queries(work, params, queries, cfg)
    n = work.snapshot.n_entities
    ranks = [rank_vector(r.score_vector(n), candidates, q.target, index.known_except(q.source, q.relation, q.target))
             for q, r in zip(queries, results)]
    return metrics(ranks)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamSet
    rules: RuleStore
    best_epoch: int
    history: list[dict]
    config: TrainConfig


def _minibatches(queries: Sequence[Query], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    groups: dict[int, list[int]] = {}
    for i, q in enumerate(queries):
        groups.setdefault(q.relation, []).append(i)
    batches = []
    for rq in sorted(groups):
        idx = np.array(groups[rq])
        rng.shuffle(idx)
        batches += [idx[s:s + batch_size] for s in range(0, len(idx), batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train(ds: MbeDataset, cfg: TrainConfig, rules: RuleStore | None = None, params: ParamSet | None = None,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """REINFORCE training on the original graph with per-epoch rule feedback.

    Every epoch trains on ``train`` plus the facts derived by the current
    trustworthy rules, folds the trajectories into the rule store, then
    scores the validation facts on the refreshed graph. The parameters and
    rule store of the best validation MRR are returned. A rule store marked
    ``frozen_overlay`` (imported) is used as is and never updated.
    """
    rng = np.random.default_rng(cfg.rng_seed)
    vocab = ds.vocab
    if params is None:
        params = init_params(vocab.n_relations, cfg, rng)
    store = RuleStore() if rules is None else rules.copy()
    frozen = store.frozen_overlay
    base = ds.train_snapshot()
    if len(base) == 0:
        raise DataError("training graph is empty")
    train_q = [Query(f.head, f.relation, f.tail) for f in ds.train]
    gold = gold_ordinals(base, train_q)
    valid = list(ds.valid)
    if cfg.valid_max_queries is not None and len(valid) > cfg.valid_max_queries:
        pick = np.sort(np.random.default_rng(cfg.rng_seed + 1).choice(len(valid), cfg.valid_max_queries, replace=False))
        valid = [valid[i] for i in pick]
    index = AnswerIndex(list(ds.train) + list(ds.valid))
    known = AnswerIndex(ds.train)
    candidates = base.entities()
    opt = Adam(params, lr=cfg.lr)
    names = params.names()
    history: list[dict] = []
    best = (-np.inf, params.copy(), store.copy(), 0)
    baseline = 0.0
    work = working_graph(base, store, cfg)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_store = RuleStore()
        losses, rewards = [], []
        for bi, idx in enumerate(_minibatches(train_q, cfg.batch_size, rng)):
            rep = np.repeat(idx, cfg.rollouts_per_query)
            queries = [train_q[i] for i in rep]
            rq = queries[0].relation
            try:
                with Tape() as tape:
                    emb = encode(work.ops, params, work.attention, rq)
                    ro = rollout(work.snapshot, params, emb, queries, cfg.max_steps, mode="sample",
                                 dropout=cfg.action_dropout, rng=rng, limit=cfg.max_actions, masked=gold[rep])
                    reward = terminal_reward(ro.final, queries, known)
                    adv = reward - baseline if cfg.baseline else reward
                    loss = reinforce_loss(ro.log_prob, adv)
                    grads = tape.gradient(loss, params.tensors())
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise NonFiniteError("gradient has non-finite entries")
            except NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, minibatch {bi} (query relation "
                                       f"{vocab.relation_label(rq)}): {exc}") from exc
            opt.step(dict(zip(names, grads)))
            if cfg.baseline:
                baseline = cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * float(reward.mean())
            losses.append(loss.item())
            rewards.append(float(reward.mean()))
            # a rule trajectory is positive only when it ends on the query's own target
            hit = terminal_reward(ro.final, queries)
            for traj, ok in zip(ro.relations, hit):
                record_trajectory(epoch_store, rq, traj.tolist(), bool(ok), vocab.self_loop)
        if not frozen:
            store.merge(epoch_store)
        work = working_graph(base, store, cfg)
        hits1 = mrr = float("nan")
        if valid:
            hits1, mrr = ranked_mrr(work, params, valid, index, candidates, cfg)
        score = mrr if valid else float(epoch)
        if score > best[0]:
            best = (score, params.copy(), store.copy(), epoch)
        rec = {"event": "epoch", "epoch": epoch, "loss": float(np.mean(losses)), "reward": float(np.mean(rewards)),
               "valid_mrr": mrr, "valid_hits1": hits1, "rules": len(store), "augmented": len(work.augmented),
               "seconds": round(time.perf_counter() - t0, 3)}
        history.append(rec)
        if log is not None:
            log(rec)
    _, best_params, best_store, best_epoch = best
    best_store.frozen_overlay = frozen
    return TrainResult(best_params, best_store, best_epoch, history, cfg)
