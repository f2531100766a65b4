"""Central-difference audit of the full training loss."""
import numpy as np

from mbe import kg
from mbe.agent import Query, TrainConfig, init_params, reinforce_loss, rollout, terminal_reward
from mbe.encoder import AttentionTable, GraphOperators, encode
from mbe.kg import Fact, GraphSnapshot, Vocabulary
from mbe.numerics.tensor import Tape


def six_entity_case(seed=0):
    rng = np.random.default_rng(seed)
    v = Vocabulary.from_relations(["r1", "r2", "rq"])
    for i in range(6):
        v.intern(f"e{i}", "entity")
    triples = [(0, 0, 1), (1, 1, 2), (0, 2, 2), (2, 0, 3), (3, 1, 4), (4, 0, 5), (5, 1, 0), (1, 2, 4), (3, 0, 3)]
    facts = [Fact(h, r, t, kg.TRAIN) for h, r, t in triples] + [Fact(0, 2, 2, kg.AUGMENTED)]
    snap = GraphSnapshot(v, facts)
    cfg = TrainConfig(dim=3, gcn_layers=2, lstm_layers=2, max_steps=3)
    params = init_params(v.n_relations, cfg, rng)
    attn = AttentionTable(3, {2: np.array([0.95, 0.7, 0.3])})
    queries = [Query(0, 2, 2), Query(1, 2, 4), Query(0, 2, 2)]
    adv = np.array([1.0, -0.5, 0.25])
    return snap, params, attn, queries, adv, cfg


def full_loss_audit(seed=0, h=1e-6):
    """Worst relative error per parameter between tape and central differences.

    Walks are sampled with the same rng seed at every evaluation and the
    audit checks they never change, so the loss is a smooth function of the
    parameters around the evaluation point.
    """
    snap, params, attn, queries, adv, cfg = six_entity_case(seed)
    ops = GraphOperators(snap)

    def loss_value():
        emb = encode(ops, params, attn, 2)
        ro = rollout(snap, params, emb, queries, cfg.max_steps, mode="sample", mask_gold=True,
                     dropout=0.2, rng=np.random.default_rng(7), limit=None)
        return reinforce_loss(ro.log_prob, adv), ro

    names = params.names()
    with Tape() as tape:
        loss, ro0 = loss_value()
        grads = tape.gradient(loss, params.tensors())
    errors = {}
    for name, g in zip(names, grads):
        x = params[name].data
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            old = x[i]
            x[i] = old + h
            up, ro1 = loss_value()
            x[i] = old - h
            down, ro2 = loss_value()
            x[i] = old
            assert np.array_equal(ro1.entities, ro0.entities) and np.array_equal(ro2.entities, ro0.entities)
            num[i] = (float(up.data) - float(down.data)) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(g).max(), 1e-8)
        errors[name] = float(np.abs(num - g).max() / scale)
    return errors, terminal_reward(ro0.final, queries)
