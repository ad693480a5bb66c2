"""Stacked heterogeneous graph-transformer layers.

Each layer projects node features through type-specific Key/Query/Value maps,
scores every typed in-edge with a per-edge-type bilinear form (times a scalar
relation prior, scaled by 1/sqrt(head_dim)), normalizes with a temperature
softmax over each destination node's incoming edges across all edge types,
and aggregates per-edge-type message transforms.  The message branch passes
through an output projection, dropout, and activation, then joins the input
through a gated residual, so a node with no in-edges passes through
unchanged.

When per-edge weights are supplied (the causal/trivial masks), each edge's
attention probability is multiplied by its weight after the softmax, with no
renormalization; all-ones weights reproduce the unweighted forward bit for
bit.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import tensor as T
from .graph import ALL_EDGE_TYPES, NODE_TYPES, edge_endpoints


@dataclass
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 8
    hidden_dim: int = 128
    activation: str = "gelu"  # or "leaky_relu"
    dropout: float = 0.2

    def validate(self):
        if self.n_layers < 1:
            raise T.ContractError("encoder needs at least one layer")
        if self.hidden_dim % self.n_heads:
            raise T.ContractError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.activation not in ("gelu", "leaky_relu"):
            raise T.ContractError(f"unknown activation {self.activation!r}")
        return self


def _glorot(rng, shape):
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_encoder_params(cfg, rng):
    """Fresh trainable parameter dict under the hgt.layer<i>.<name> namespace.

    Every edge type of the closed schema gets its parameter set up front;
    a lookup miss later is therefore a real bug, never a silent default.
    Relation priors start at 1 and skip gates small, so early layers are
    residual-dominated.
    """
    cfg.validate()
    d, h = cfg.hidden_dim, cfg.n_heads
    hd = d // h
    params = {}
    for layer in range(cfg.n_layers):
        pre = f"hgt.layer{layer}."
        for t in NODE_TYPES:
            params[pre + f"k.{t}"] = T.Tensor(_glorot(rng, (d, d)), requires_grad=True)
            params[pre + f"q.{t}"] = T.Tensor(_glorot(rng, (d, d)), requires_grad=True)
            params[pre + f"v.{t}"] = T.Tensor(_glorot(rng, (d, d)), requires_grad=True)
            params[pre + f"out.{t}"] = T.Tensor(_glorot(rng, (d, d)), requires_grad=True)
            params[pre + f"gate.{t}"] = T.Tensor(np.array([0.1]), requires_grad=True)
        for e in ALL_EDGE_TYPES:
            params[pre + f"att.{e}"] = T.Tensor(_glorot(rng, (h, hd, hd)), requires_grad=True)
            params[pre + f"msg.{e}"] = T.Tensor(_glorot(rng, (h, hd, hd)), requires_grad=True)
            params[pre + f"prior.{e}"] = T.Tensor(np.array([1.0]), requires_grad=True)
    return params


def _activation(cfg, x):
    return T.gelu(x) if cfg.activation == "gelu" else T.leaky_relu(x, 0.2)


def hgt_layer_forward(sample, feats, params, prefix, cfg, edge_weights=None,
                      temperature=1.0, rng=None, training=False, attn_sink=None):
    """One layer of typed attention aggregation.

    feats: node type -> Tensor (n, d).  edge_weights: edge type -> Tensor of
    per-edge scalars, multiplied into attention probabilities post-softmax.
    attn_sink, when a dict, receives per-destination-type attention arrays
    for the explanation export.
    """
    if temperature <= 0:
        raise T.DomainError(f"temperature must be positive, got {temperature}")
    g = sample.graph
    d, n_heads = cfg.hidden_dim, cfg.n_heads
    hd = d // n_heads

    def p(name):
        key = prefix + name
        if key not in params:
            raise T.ContractError(f"missing encoder parameter {key!r}")
        return params[key]

    live = [t for t in NODE_TYPES if g.node_count(t)]
    keys = {t: T.matmul(feats[t], p(f"k.{t}")) for t in live}
    queries = {t: T.matmul(feats[t], p(f"q.{t}")) for t in live}
    values = {t: T.matmul(feats[t], p(f"v.{t}")) for t in live}

    out = {}
    for dst_type in live:
        n_dst = g.node_count(dst_type)
        logit_parts, msg_parts, dst_parts, w_parts, meta = [], [], [], [], []
        for etype in ALL_EDGE_TYPES:
            src_type, dt = edge_endpoints(etype)
            if dt != dst_type or g.edge_count(etype) == 0:
                continue
            src, dst = g.edges[etype]
            n_e = len(src)
            k3 = T.transpose(T.reshape(T.gather_rows(keys[src_type], src), (n_e, n_heads, hd)), (1, 0, 2))
            q3 = T.transpose(T.reshape(T.gather_rows(queries[dst_type], dst), (n_e, n_heads, hd)), (1, 0, 2))
            v3 = T.transpose(T.reshape(T.gather_rows(values[src_type], src), (n_e, n_heads, hd)), (1, 0, 2))
            kw = T.matmul(k3, p(f"att.{etype}"))
            logits = T.mul(T.tsum(T.mul(kw, q3), axis=2), p(f"prior.{etype}"))  # (H, E)
            msg_parts.append(T.matmul(v3, p(f"msg.{etype}")))                   # (H, E, hd)
            logit_parts.append(logits)
            dst_parts.append(dst)
            meta.append((etype, src, dst))
            if edge_weights is not None:
                w_parts.append(edge_weights[etype])

        if not logit_parts:
            out[dst_type] = feats[dst_type]
            continue

        all_logits = logit_parts[0] if len(logit_parts) == 1 else T.concat(logit_parts, axis=1)
        all_msg = msg_parts[0] if len(msg_parts) == 1 else T.concat(msg_parts, axis=1)
        dst_all = np.concatenate(dst_parts)
        n_e = len(dst_all)

        z = T.mul(all_logits, 1.0 / (temperature * math.sqrt(hd)))
        shift = np.stack([_kernels.segment_max(z.data[h], dst_all, n_dst)[dst_all]
                          for h in range(n_heads)])
        e = T.exp(T.sub(z, T.Tensor(shift)))
        e_t = T.transpose(e, (1, 0))                                   # (E, H)
        denom = T.scatter_add_rows(e_t, dst_all, n_dst)                # (n_dst, H)
        att = T.div(e_t, T.gather_rows(denom, dst_all))                # (E, H)
        eff = att
        if edge_weights is not None:
            w_all = w_parts[0] if len(w_parts) == 1 else T.concat(w_parts, axis=0)
            eff = T.mul(att, T.reshape(w_all, (n_e, 1)))

        if attn_sink is not None:
            offset = 0
            records = []
            for etype, src, dst in meta:
                span = slice(offset, offset + len(src))
                records.append({
                    "edge_type": etype, "src": src, "dst": dst,
                    "attention": att.data[span].copy(),
                    "effective": eff.data[span].copy(),
                })
                offset += len(src)
            attn_sink[dst_type] = records

        weighted = T.mul(T.transpose(all_msg, (1, 0, 2)), T.reshape(eff, (n_e, n_heads, 1)))
        agg = T.scatter_add_rows(T.reshape(weighted, (n_e, d)), dst_all, n_dst)
        hproj = T.matmul(agg, p(f"out.{dst_type}"))
        if training and cfg.dropout > 0:
            hproj = T.dropout(hproj, cfg.dropout, rng, training=True)
        msg_branch = _activation(cfg, hproj)
        out[dst_type] = T.add(T.mul(msg_branch, p(f"gate.{dst_type}")), feats[dst_type])

    for t in NODE_TYPES:
        if t not in out and t in feats:
            out[t] = feats[t]
    return out


def encode(sample, cfg, params, feats=None, edge_weights=None, temperature=1.0,
           rng=None, training=False, attn_sink=None):
    """Run all layers; returns final per-type node representations.

    feats defaults to constant tensors over the graph's feature matrices;
    pass a dict of Tensors to differentiate with respect to inputs.
    attn_sink, when provided, captures the final layer's attention maps.
    """
    cfg.validate()
    g = sample.graph
    if feats is None:
        feats = {t: T.Tensor(g.features[t]) for t in NODE_TYPES if g.node_count(t)}
    for layer in range(cfg.n_layers):
        sink = attn_sink if layer == cfg.n_layers - 1 else None
        feats = hgt_layer_forward(sample, feats, params, f"hgt.layer{layer}.", cfg,
                                  edge_weights=edge_weights, temperature=temperature,
                                  rng=rng, training=training, attn_sink=sink)
    return feats
