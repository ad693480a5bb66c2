"""Causal/trivial edge disentanglement and the noise-matching regularizer.

A shared score head maps each edge's concatenated (source, destination)
input features to two logits; a 2-way temperature softmax turns them into a
causal weight and its exact complement.  Encoding the same subgraph twice,
once under each weighting, yields the causal representations that feed the
task heads and the trivial representations whose predictions are pushed
toward per-node noise draws by a Jensen-Shannon term.

By default the trivial pass runs against detached encoder weights, so the
noise objective trains only the score head and the trivial readouts; a flag
restores full gradient flow.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import ALL_EDGE_TYPES, NODE_TYPES, edge_endpoints
from .encoder import _glorot, encode

_JS_CLAMP = 1e-12
_LN2 = math.log(2.0)


@dataclass
class DisentangleMask:
    """Per-edge causal weights and their exact 1-minus complements."""
    causal: dict   # edge type -> Tensor (E,)
    trivial: dict  # edge type -> Tensor (E,)


def init_score_params(d, rng, hidden=None):
    """Two-layer score head over concatenated (src, dst) features -> 2 logits."""
    hidden = hidden or d
    return {
        "score.w1": T.Tensor(_glorot(rng, (2 * d, hidden)), requires_grad=True),
        "score.b1": T.Tensor(np.zeros(hidden), requires_grad=True),
        "score.w2": T.Tensor(_glorot(rng, (hidden, 2)), requires_grad=True),
        "score.b2": T.Tensor(np.zeros(2), requires_grad=True),
    }


def compute_masks(sample, feats, params, temperature=1.0):
    """Score every edge and split it into (causal, trivial) weights.

    feats: node type -> Tensor of input features.  At zero scores the split
    is exactly (0.5, 0.5); the complement is computed by subtraction so the
    two weights always sum to one bit-exactly.
    """
    g = sample.graph
    causal, trivial = {}, {}
    for etype in ALL_EDGE_TYPES:
        n_e = g.edge_count(etype)
        if n_e == 0:
            causal[etype] = T.Tensor(np.empty(0))
            trivial[etype] = T.Tensor(np.empty(0))
            continue
        st, dt = edge_endpoints(etype)
        src, dst = g.edges[etype]
        pair = T.concat([T.gather_rows(feats[st], src),
                         T.gather_rows(feats[dt], dst)], axis=1)
        h = T.gelu(T.add(T.matmul(pair, params["score.w1"]), params["score.b1"]))
        scores = T.add(T.matmul(h, params["score.w2"]), params["score.b2"])
        alpha = T.softmax(scores, temperature=temperature, axis=1)
        a_c = T.reshape(T.slice_axis(alpha, 1, 0, 1), (n_e,))
        causal[etype] = a_c
        trivial[etype] = T.sub(T.Tensor(np.ones(n_e)), a_c)
    return DisentangleMask(causal=causal, trivial=trivial)


def dual_encode(sample, cfg, params, mask, temperature=1.0, rng=None,
                training=False, feats=None, stop_trivial_encoder=True,
                attn_sink=None):
    """Two shared-weight encoder passes: causal-weighted and trivial-weighted.

    With stop_trivial_encoder (default) the trivial pass sees detached
    encoder parameters, so its loss reaches the score head through the edge
    weights but never the shared representation weights.
    """
    causal_reps = encode(sample, cfg, params, feats=feats,
                         edge_weights=mask.causal, temperature=temperature,
                         rng=rng, training=training, attn_sink=attn_sink)
    enc_params = params
    if stop_trivial_encoder:
        enc_params = {k: (v.detach() if k.startswith("hgt.") else v)
                      for k, v in params.items()}
    trivial_reps = encode(sample, cfg, enc_params, feats=feats,
                          edge_weights=mask.trivial, temperature=temperature,
                          rng=rng, training=training)
    return causal_reps, trivial_reps


def js_divergence(p, q, axis=-1):
    """Natural-log Jensen-Shannon divergence along `axis`, with both inputs
    clamped to >= 1e-12 before any log; bounded by ln 2."""
    p = T.clip_min(p, _JS_CLAMP)
    q = T.clip_min(q, _JS_CLAMP)
    m = T.mul(T.add(p, q), 0.5)
    log_m = T.log(m)
    kl_pm = T.tsum(T.mul(p, T.sub(T.log(p), log_m)), axis=axis)
    kl_qm = T.tsum(T.mul(q, T.sub(T.log(q), log_m)), axis=axis)
    return T.mul(T.add(kl_pm, kl_qm), 0.5)


def sample_noise_distribution(rng, shape, fixed_uniform=False):
    """Per-node noise targets: U(0,1) entries normalized to the simplex along
    the last axis, or the exact uniform vector when fixed_uniform is set."""
    if fixed_uniform:
        return np.full(shape, 1.0 / shape[-1])
    draw = rng.uniform(1e-9, 1.0, size=shape)
    return draw / draw.sum(axis=-1, keepdims=True)


def uniform_loss(trivial_logits, rng, kind="categorical", fixed_uniform=False):
    """Mean Jensen-Shannon divergence between fresh noise draws and the
    trivial branch's predicted distributions.

    categorical: one distribution per node via softmax over classes.
    multilabel: per label, the 2-point (sigmoid, 1-sigmoid) distribution
    against a normalized 2-entry noise draw, averaged over labels.
    """
    n = trivial_logits.shape[0]
    if n == 0:
        raise T.ContractError("uniform_loss needs at least one target node")
    if kind == "multilabel":
        n_labels = trivial_logits.shape[1]
        s = T.sigmoid(trivial_logits)
        p = T.concat([T.reshape(s, (n, n_labels, 1)),
                      T.reshape(T.sub(T.Tensor(np.ones((n, n_labels))), s), (n, n_labels, 1))],
                     axis=2)
        y = T.Tensor(sample_noise_distribution(rng, (n, n_labels, 2), fixed_uniform))
        return T.tmean(js_divergence(y, p, axis=2))
    p = T.softmax(trivial_logits, temperature=1.0, axis=1)
    y = T.Tensor(sample_noise_distribution(rng, trivial_logits.shape, fixed_uniform))
    return T.tmean(js_divergence(y, p, axis=1))


def export_masks_csv(sample, mask, path):
    """Edge-level causal weights as (edge_type, src, dst, alpha_causal) rows,
    in external-id terms, for attention case studies."""
    g = sample.graph
    with open(path, "w") as fh:
        fh.write("edge_type,src,dst,alpha_causal\n")
        for etype in ALL_EDGE_TYPES:
            if g.edge_count(etype) == 0:
                continue
            st, dt = edge_endpoints(etype)
            src, dst = g.edges[etype]
            a = mask.causal[etype].data
            for s, d, w in zip(src, dst, a):
                fh.write(f"{etype},{g.node_ids[st][s]},{g.node_ids[dt][d]},{w:.10g}\n")
