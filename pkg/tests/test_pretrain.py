import math

import numpy as np
import pytest

from multehr import tensor as T
from multehr.graph import NODE_TYPES, REVERSE_OF, HeteroGraph
from multehr.pretrain import (PretrainConfig, features_from_params,
                              filtered_tail_ranks, init_transe_params,
                              negative_sample, pretrain_loss, pretrain_run,
                              transe_score)


def cycle_graph(n=30, d=16):
    """Bipartite cycle: visit i links to diagnosis i and diagnosis i-1, so
    each (visit, relation) query has exactly two true tails."""
    node_ids = {t: [] for t in NODE_TYPES}
    node_ids["visit"] = [f"v{i}" for i in range(n)]
    node_ids["diagnosis"] = [f"d{i}" for i in range(n)]
    idx = np.arange(n, dtype=np.int64)
    src = np.concatenate([idx, idx])
    dst = np.concatenate([idx, (idx + 1) % n])
    edges = {"visit_diagnosis": (src, dst),
             REVERSE_OF["visit_diagnosis"]: (dst.copy(), src.copy())}
    feats = {t: np.zeros((len(node_ids[t]), d)) for t in NODE_TYPES}
    return HeteroGraph(node_ids=node_ids, edges=edges, features=feats,
                       feature_dim=d).validate()


def test_transe_score_examples():
    assert transe_score([1, 0], [0, 1], [1, 1]) == 0.0
    assert transe_score([0, 0], [1, 0], [0, 1]) == pytest.approx(math.sqrt(2), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert transe_score(rng.normal(size=4), rng.normal(size=4), rng.normal(size=4)) >= 0
    with pytest.raises(T.ShapeMismatchError):
        transe_score([1, 0], [0, 1, 2], [1, 1])


def test_transe_score_l1_flag():
    assert transe_score([0, 0], [1, 0], [0, 1], norm="l1") == pytest.approx(2.0)


def test_negative_sample_forced_choice():
    g = cycle_graph(n=2)
    # corrupting the tail of (v0 -> d0) can only produce d1
    negs = negative_sample(g, "visit_diagnosis", 0, 0, 20, np.random.default_rng(1))
    for etype, s, d in negs:
        assert etype == "visit_diagnosis"
        assert (s, d) != (0, 0)
        assert (s == 0 and d == 1) or (s == 1 and d == 0)


def test_negative_sample_never_reproduces_positive():
    g = cycle_graph(n=12)
    negs = negative_sample(g, "visit_diagnosis", 3, 3, 100, np.random.default_rng(2))
    assert all((s, d) != (3, 3) for _, s, d in negs)


def test_negative_sample_uniform_replacements():
    g = cycle_graph(n=10)
    rng = np.random.default_rng(3)
    counts = np.zeros(10)
    k = 10 ** 4
    for _, s, d in negative_sample(g, "visit_diagnosis", 4, 4, k, rng):
        counts[d if s == 4 else s] += 1
    observed = np.delete(counts, 4)  # the positive endpoints are excluded by design
    expected = k / 9.0
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    assert chi2 <= 26.12  # chi-square(8) critical value at p = 0.001


def test_pretrain_loss_hand_values():
    pos = T.Tensor([0.5])
    neg = T.Tensor([[0.2]])
    assert pretrain_loss(pos, neg, 1.0).item() == pytest.approx(1.3, abs=1e-12)
    # all negatives beat positives by at least the margin
    satisfied = pretrain_loss(T.Tensor([0.1, 0.2]), T.Tensor([[1.5, 2.0], [1.3, 1.9]]), 1.0)
    assert satisfied.item() == 0.0
    tiny = pretrain_loss(T.Tensor([0.7]), T.Tensor([[0.7]]), 1e-9)
    assert tiny.item() <= 1e-6


def test_pretrain_loss_monotone_in_negative_score():
    pos = T.Tensor([1.0])
    lo = pretrain_loss(pos, T.Tensor([[0.5]]), 1.0).item()
    hi = pretrain_loss(pos, T.Tensor([[1.2]]), 1.0).item()
    assert lo >= hi >= 0.0


def test_pretrain_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    rel = rng.normal(size=4)

    def f(x):
        emb = T.reshape(x, (6, 4))
        h = T.gather_rows(emb, np.array([0, 1, 2]))
        t = T.gather_rows(emb, np.array([3, 4, 5]))
        pos = T.l2_norm(T.sub(T.add(h, T.Tensor(rel[None, :])), t), axis=1)
        tn = T.gather_rows(emb, np.array([5, 3, 4]))
        neg = T.reshape(T.l2_norm(T.sub(T.add(h, T.Tensor(rel[None, :])), tn), axis=1), (3, 1))
        return pretrain_loss(pos, neg, 1.0)

    for _ in range(10):
        x = rng.uniform(-2, 2, size=24)
        assert T.finite_diff_check(f, T.Tensor(x), 1e-4) <= 1e-4


def test_entity_rows_stay_unit_norm():
    g = cycle_graph(n=8, d=8)
    cfg = PretrainConfig(epochs=3, batch_size=8, negatives=2, learning_rate=0.05)
    params, _ = pretrain_run(g, cfg, np.random.default_rng(5))
    for t in ("visit", "diagnosis"):
        norms = np.linalg.norm(params[f"transe.{t}"].data, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)


def test_zero_epochs_returns_unit_norm_initialization():
    g = cycle_graph(n=6, d=8)
    params, trace = pretrain_run(g, PretrainConfig(epochs=0), np.random.default_rng(6))
    assert trace == []
    ref = init_transe_params(g, np.random.default_rng(6))
    np.testing.assert_array_equal(params["transe.visit"].data, ref["transe.visit"].data)


def test_pretrain_deterministic():
    g = cycle_graph(n=10, d=8)
    cfg = PretrainConfig(epochs=4, batch_size=16, learning_rate=0.03)
    p1, t1 = pretrain_run(g, cfg, np.random.default_rng(7))
    p2, t2 = pretrain_run(g, cfg, np.random.default_rng(7))
    assert t1 == t2
    np.testing.assert_array_equal(p1["transe.visit"].data, p2["transe.visit"].data)


def test_cycle_ranks_reach_top_decile():
    g = cycle_graph(n=40, d=16)
    cfg = PretrainConfig(epochs=200, batch_size=128, negatives=4, learning_rate=0.05)
    params, trace = pretrain_run(g, cfg, np.random.default_rng(8))
    ranks = filtered_tail_ranks(params, g, "visit_diagnosis")
    assert ranks.mean() <= 0.1 * g.node_count("diagnosis")
    assert trace[-1] < trace[0]


def test_rank_improves_over_training_windows():
    for seed in range(5):
        g = cycle_graph(n=20, d=8)
        rng = np.random.default_rng(seed)
        params = init_transe_params(g, rng)
        init_rank = filtered_tail_ranks(params, g, "visit_diagnosis").mean()
        cfg = PretrainConfig(epochs=25, batch_size=64, learning_rate=0.05)
        window_means = []
        trained = init_transe_params(g, np.random.default_rng(seed))
        state = T.AdamState(learning_rate=cfg.learning_rate, weight_decay=0.0)
        run_rng = np.random.default_rng(seed + 100)
        for window in range(5):
            sub_cfg = PretrainConfig(epochs=5, batch_size=64, learning_rate=0.05)
            trained, _ = _continue_pretrain(g, sub_cfg, trained, state, run_rng)
            window_means.append(filtered_tail_ranks(trained, g, "visit_diagnosis").mean())
        assert window_means[-1] < init_rank
        slope = np.polyfit(np.arange(6), [init_rank] + window_means, 1)[0]
        assert slope < 0


def _continue_pretrain(g, cfg, params, state, rng):
    from multehr.pretrain import _batch_scores, _negative_batch
    for _ in range(cfg.epochs):
        for etype in ("visit_diagnosis", "diagnosis_visit"):
            src, dst = g.edges[etype]
            order = rng.permutation(len(src))
            for lo in range(0, len(order), cfg.batch_size):
                sel = order[lo:lo + cfg.batch_size]
                ns, nd = _negative_batch(g, etype, src[sel], dst[sel], cfg.negatives, rng)
                pos = _batch_scores(params, etype, src[sel], dst[sel], cfg.norm)
                neg = T.reshape(_batch_scores(params, etype, ns.reshape(-1), nd.reshape(-1), cfg.norm),
                                (len(sel), cfg.negatives))
                loss = pretrain_loss(pos, neg, cfg.margin)
                T.backward(loss)
                T.adam_step(params, state)
                for t in ("visit", "diagnosis"):
                    m = params[f"transe.{t}"].data
                    m /= np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    return params, None


def test_features_from_params_shapes():
    g = cycle_graph(n=5, d=8)
    params, _ = pretrain_run(g, PretrainConfig(epochs=1, batch_size=8),
                             np.random.default_rng(9))
    feats = features_from_params(g, params)
    assert feats["visit"].shape == (5, 8)
    assert feats["patient"].shape == (0, 8)
