"""Translational embedding pretraining over the typed graph.

Each edge (h, r, t) is scored by the norm of h + r - t; training minimizes a
margin hinge between every positive edge and its corrupted negatives, where a
corruption replaces the head or the tail (coin flip) with a uniformly drawn
node of the same type.  Entity rows are renormalized to unit length after
every optimizer step; relation vectors (one per edge type, reverses
independent) stay free.  The learned entity matrices become the graph's node
features.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import ALL_EDGE_TYPES, NODE_TYPES, edge_endpoints


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 1024
    negatives: int = 4
    margin: float = 1.0
    learning_rate: float = 0.01
    weight_decay: float = 0.0
    norm: str = "l2"  # or "l1"

    def validate(self):
        if self.margin <= 0:
            raise T.ContractError("margin must be positive")
        if self.negatives < 1:
            raise T.ContractError("need at least one negative per positive")
        if self.norm not in ("l2", "l1"):
            raise T.ContractError(f"unknown norm {self.norm!r}")
        return self


def init_transe_params(g, rng):
    """Entity matrices (unit rows) and relation vectors, uniform in
    [-6/sqrt(d), 6/sqrt(d)]."""
    d = g.feature_dim
    bound = 6.0 / np.sqrt(d)
    params = {}
    for t in NODE_TYPES:
        n = g.node_count(t)
        emb = rng.uniform(-bound, bound, size=(n, d))
        if n:
            emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        params[f"transe.{t}"] = T.Tensor(emb, requires_grad=True)
    for e in ALL_EDGE_TYPES:
        params[f"transe.rel.{e}"] = T.Tensor(rng.uniform(-bound, bound, size=d),
                                             requires_grad=True)
    return params


def transe_score(h, r, t, norm="l2"):
    """Plausibility distance of a single edge; 0 means exact translation."""
    h, r, t = (np.asarray(v, dtype=np.float64) for v in (h, r, t))
    if not h.shape == r.shape == t.shape:
        raise T.ShapeMismatchError(
            f"transe_score dims differ: {h.shape}, {r.shape}, {t.shape}")
    diff = h + r - t
    return float(np.abs(diff).sum() if norm == "l1" else np.linalg.norm(diff))


def _batch_scores(params, etype, src_idx, dst_idx, norm):
    st, dt = edge_endpoints(etype)
    h = T.gather_rows(params[f"transe.{st}"], src_idx)
    t = T.gather_rows(params[f"transe.{dt}"], dst_idx)
    r = T.reshape(params[f"transe.rel.{etype}"], (1, -1))
    diff = T.sub(T.add(h, r), t)
    if norm == "l1":
        return T.tsum(T.mul(diff, T.Tensor(np.sign(diff.data))), axis=1)
    return T.l2_norm(diff, axis=1)


def negative_sample(g, etype, src, dst, k, rng):
    """k corruptions of one positive edge: coin-flip head-or-tail, uniform
    same-type replacement, resampled if it reproduces the positive."""
    st, dt = edge_endpoints(etype)
    n_src, n_dst = g.node_count(st), g.node_count(dt)
    if n_src < 2 and n_dst < 2:
        raise T.ContractError(f"cannot corrupt {etype}: both endpoint types are singletons")
    out = []
    for _ in range(k):
        corrupt_head = bool(rng.random() < 0.5)
        if n_src < 2:
            corrupt_head = False
        elif n_dst < 2:
            corrupt_head = True
        if corrupt_head:
            repl = int(rng.integers(0, n_src))
            while repl == src:
                repl = int(rng.integers(0, n_src))
            out.append((etype, repl, dst))
        else:
            repl = int(rng.integers(0, n_dst))
            while repl == dst:
                repl = int(rng.integers(0, n_dst))
            out.append((etype, src, repl))
    return out


def _negative_batch(g, etype, src, dst, k, rng):
    """Vectorized corruption of a batch of edges; returns (src, dst) of shape
    (B, k) pairs alongside the corrupted-side mask."""
    st, dt = edge_endpoints(etype)
    n_src, n_dst = g.node_count(st), g.node_count(dt)
    b = len(src)
    if n_src < 2 and n_dst < 2:
        raise T.ContractError(f"cannot corrupt {etype}: both endpoint types are singletons")
    heads = rng.random((b, k)) < 0.5
    if n_src < 2:
        heads[:] = False
    elif n_dst < 2:
        heads[:] = True
    neg_src = np.repeat(src[:, None], k, axis=1)
    neg_dst = np.repeat(dst[:, None], k, axis=1)
    repl = rng.integers(0, n_src, size=(b, k))
    coll = heads & (repl == neg_src)
    while coll.any():
        repl[coll] = rng.integers(0, n_src, size=int(coll.sum()))
        coll = heads & (repl == neg_src)
    neg_src[heads] = repl[heads]
    repl = rng.integers(0, n_dst, size=(b, k))
    coll = (~heads) & (repl == neg_dst)
    while coll.any():
        repl[coll] = rng.integers(0, n_dst, size=int(coll.sum()))
        coll = (~heads) & (repl == neg_dst)
    neg_dst[~heads] = repl[~heads]
    return neg_src, neg_dst


def pretrain_loss(pos_scores, neg_scores, margin):
    """Sum over (positive, negative) pairs of max(f(e) - f(e') + margin, 0)."""
    if pos_scores.size == 0:
        raise T.ContractError("pretrain_loss on an empty batch")
    pos = T.reshape(pos_scores, (-1, 1))
    return T.tsum(T.relu(T.add(T.sub(pos, neg_scores), margin)))


def pretrain_run(g, cfg, rng):
    """Minibatched margin training over every edge (forward and reverse each
    under its own relation vector).  Returns (params, per-epoch loss trace);
    entity matrices are unit-row initialized, so zero epochs is a no-op."""
    cfg.validate()
    params = init_transe_params(g, rng)
    entity_names = [f"transe.{t}" for t in NODE_TYPES if g.node_count(t)]
    etypes = [e for e in ALL_EDGE_TYPES if g.edge_count(e)]
    state = T.AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    trace = []
    for _ in range(cfg.epochs):
        epoch_loss = 0.0
        n_pairs = 0
        for etype in etypes:
            src, dst = g.edges[etype]
            order = rng.permutation(len(src))
            for lo in range(0, len(order), cfg.batch_size):
                sel = order[lo:lo + cfg.batch_size]
                bs, bd = src[sel], dst[sel]
                neg_src, neg_dst = _negative_batch(g, etype, bs, bd, cfg.negatives, rng)
                pos = _batch_scores(params, etype, bs, bd, cfg.norm)
                neg = T.reshape(
                    _batch_scores(params, etype, neg_src.reshape(-1), neg_dst.reshape(-1), cfg.norm),
                    (len(sel), cfg.negatives))
                loss = pretrain_loss(pos, neg, cfg.margin)
                T.backward(loss)
                T.adam_step(params, state)
                for name in entity_names:
                    m = params[name].data
                    m /= np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
                epoch_loss += loss.item()
                n_pairs += len(sel) * cfg.negatives
        trace.append(epoch_loss / max(n_pairs, 1))
    return params, trace


def features_from_params(g, params):
    """Entity embedding matrices keyed by node type, copied out of the
    trainable parameters."""
    return {t: params[f"transe.{t}"].data.copy() for t in NODE_TYPES}


def filtered_tail_ranks(params, g, etype, norm="l2"):
    """Exhaustive link-prediction oracle: for every edge (h, r, t), the rank
    of t among all same-type candidates, excluding other known true tails of
    the same (h, r).  1-based; lower is better."""
    st, dt = edge_endpoints(etype)
    src, dst = g.edges[etype]
    heads = params[f"transe.{st}"].data
    tails = params[f"transe.{dt}"].data
    rel = params[f"transe.rel.{etype}"].data
    true_tails = {}
    for s, d in zip(src, dst):
        true_tails.setdefault(int(s), set()).add(int(d))
    ranks = []
    for s, d in zip(src, dst):
        query = heads[s] + rel
        diff = query[None, :] - tails
        scores = (np.abs(diff).sum(axis=1) if norm == "l1"
                  else np.linalg.norm(diff, axis=1))
        competitors = np.ones(len(tails), dtype=bool)
        for other in true_tails[int(s)]:
            if other != d:
                competitors[other] = False
        better = scores[competitors] < scores[d]
        ranks.append(int(better.sum()) + 1)
    return np.array(ranks)
