"""The training loop: per-epoch visit-anchored subgraph sampling with
augmentation, per-task dual encoding and losses, mortality downsampling,
temperature annealing, variance-regularized aggregation, Adam, early stopping
on mean validation AUROC, and checkpointing.

The prescription-target task always runs against a view with the labeled
visits' prescription edges removed; tasks sharing a view share one encoder
pass per step.  The graph is transductive (one graph over all records,
pretrained without labels); supervision anchors only on the configured
split's visits.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .causal import compute_masks, dual_encode
from .encoder import encode
from .graph import NODE_TYPES, augment, drop_prescription_edges_for, induced_on_visits
from .heads import head_forward, multitask_aggregate, task_loss
from .metrics import evaluate_task

log = logging.getLogger("multehr.training")

LR_PRESETS = {"main": (5e-5, 1e-5), "appendix": (0.005, 0.001)}


class NumericFailure(RuntimeError):
    """Non-finite loss; carries a diagnostic payload of the offending step."""

    def __init__(self, message, dump):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    max_epochs: int = 1000
    patience: int = 20
    learning_rate: float = 5e-5
    weight_decay: float = 1e-5
    n_visit: int = 2000
    anneal_rate: float = 0.01
    temperature_floor: float = 0.05
    anneal_literal: bool = False
    beta: float = 1.0
    edge_drop_p: float = 0.05
    node_drop_p: float = 0.05
    noise_sigma: float = 0.01
    causal_enabled: bool = True
    task_agg_enabled: bool = True
    sample_variance: bool = False
    fixed_uniform: bool = False
    stop_trivial_encoder: bool = True
    balance_mort: bool = True
    seed: int = 0

    def validate(self):
        if self.max_epochs < 1 or self.patience < 0:
            raise T.ContractError("max_epochs must be >= 1 and patience >= 0")
        if not (0.0 < self.temperature_floor <= 1.0):
            raise T.ContractError("temperature floor must lie in (0, 1]")
        if self.anneal_rate <= 0 or self.learning_rate <= 0:
            raise T.ContractError("rates must be positive")
        return self


@dataclass
class EpochReport:
    epoch: int
    temperature: float
    train_losses: dict
    aggregate: float
    val_metrics: dict
    val_score: float
    best: bool


@dataclass
class TrainResult:
    best_params: dict          # name -> ndarray snapshot (includes features)
    best_epoch: int
    best_temperature: float
    best_score: float
    history: list = field(default_factory=list)


def anneal_temperature(epoch, rate=0.01, floor=0.05, literal=False):
    """Decaying schedule max(floor, exp(-rate*epoch)); the literal flag keeps
    the growing exp(rate*epoch) variant for comparison."""
    if epoch < 0:
        raise T.ContractError("epoch index must be >= 0")
    raw = math.exp(rate * epoch) if literal else math.exp(-rate * epoch)
    return max(floor, raw)


def balance_mortality(rows, labels, rng):
    """Downsample the majority class to the minority count (1:1); a
    single-class batch is returned unchanged with a warning."""
    rows = np.asarray(rows, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = rows[labels == 1]
    neg = rows[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        log.warning("mortality batch has a single class (%d pos / %d neg); kept as is",
                    len(pos), len(neg))
        return rows
    if len(pos) == len(neg):
        return rows
    major, minor = (pos, neg) if len(pos) > len(neg) else (neg, pos)
    kept = rng.choice(major, size=len(minor), replace=False)
    return np.sort(np.concatenate([minor, kept]))


def task_targets(sample, labels, spec):
    """(subgraph visit rows, label array) for one task on one sample.

    Rows without a defined label are excluded; the drug task targets visits
    with at least one prescription code, as a multi-hot matrix.
    """
    parents = sample.visit_parent_indices
    if spec.task_id == "MORT":
        y = labels.mort[parents]
        rows = np.arange(len(parents))
        return rows, y
    if spec.task_id == "READM":
        y = labels.readm[parents]
        rows = np.flatnonzero(y >= 0)
        return rows, y[rows]
    if spec.task_id == "LOS":
        y = labels.los_class[parents]
        rows = np.flatnonzero(y >= 0)
        return rows, y[rows]
    if spec.task_id == "DRUG":
        sets = [labels.drug_sets[p] for p in parents]
        rows = np.flatnonzero([len(s) > 0 for s in sets])
        y = np.zeros((len(rows), spec.n_classes), dtype=np.int64)
        for i, r in enumerate(rows):
            y[i, sorted(sets[r])] = 1
        return rows, y
    raise T.ContractError(f"unknown task {spec.task_id!r}")


def _encode_view(view, params, enc_cfg, cfg, temperature, rng, training):
    """One (dual) encoder pass over a graph view; trivial reps are None when
    the causal module is disabled."""
    feats = {t: T.Tensor(view.graph.features[t])
             for t in NODE_TYPES if view.graph.node_count(t)}
    if not cfg.causal_enabled:
        reps = encode(view, enc_cfg, params, feats=feats, temperature=temperature,
                      rng=rng, training=training)
        return reps, None
    mask = compute_masks(view, feats, params, temperature=temperature)
    causal_reps, trivial_reps = dual_encode(
        view, enc_cfg, params, mask, temperature=temperature, rng=rng,
        training=training, feats=feats,
        stop_trivial_encoder=cfg.stop_trivial_encoder)
    return causal_reps, trivial_reps


def train_step(g, labels, params, enc_cfg, cfg, tasks, temperature, rng,
               train_visits=None, opt_state=None):
    """One optimization step; returns a loss bundle dict.

    Samples a subgraph (anchored on train_visits when given), augments it,
    runs each configured task through its view, aggregates, and applies one
    Adam update over every parameter that received gradient.
    """
    pool = np.arange(g.node_count("visit")) if train_visits is None else np.asarray(train_visits)
    k = min(cfg.n_visit, len(pool))
    chosen = np.sort(rng.choice(pool, size=k, replace=False))
    sample = augment(induced_on_visits(g, chosen), cfg.edge_drop_p, cfg.node_drop_p,
                     cfg.noise_sigma, rng)

    views = {}

    def view_for(spec):
        key = "drug" if spec.task_id == "DRUG" else "standard"
        if key not in views:
            if key == "drug":
                rows, _ = task_targets(sample, labels, spec)
                view = drop_prescription_edges_for(sample, rows)
            else:
                view = sample
            views[key] = (view, _encode_view(view, params, enc_cfg, cfg,
                                             temperature, rng, training=True))
        return views[key]

    losses, per_task, skipped = [], {}, []
    for spec in tasks:
        rows, y = task_targets(sample, labels, spec)
        if len(rows) == 0:
            skipped.append(spec.task_id)
            log.info("task %s skipped this step: no labeled visits in sample", spec.task_id)
            continue
        if spec.task_id == "MORT" and cfg.balance_mort:
            kept = balance_mortality(rows, y, rng)
            keep_mask = np.isin(rows, kept)
            rows, y = rows[keep_mask], y[keep_mask]
        _, (causal_reps, trivial_reps) = view_for(spec)
        target_reps = T.gather_rows(causal_reps["visit"], rows)
        logits = head_forward(params, spec.task_id, target_reps, rng=rng,
                              training=True, dropout=enc_cfg.dropout)
        trivial_logits = None
        lam_active = cfg.causal_enabled and spec.lam > 0
        if lam_active:
            triv_reps = T.gather_rows(trivial_reps["visit"], rows)
            trivial_logits = head_forward(params, spec.task_id, triv_reps, rng=rng,
                                          training=True, dropout=enc_cfg.dropout,
                                          trivial=True)
        eff_spec = spec if lam_active else type(spec)(spec.task_id, spec.kind,
                                                      spec.n_classes, lam=0.0)
        l_k, parts = task_loss(eff_spec, logits, trivial_logits, y, rng,
                               fixed_uniform=cfg.fixed_uniform)
        losses.append(l_k)
        per_task[spec.task_id] = parts

    if not losses:
        return {"aggregate": math.nan, "tasks": per_task, "skipped": skipped}

    if cfg.task_agg_enabled:
        total = multitask_aggregate(losses, beta=cfg.beta,
                                    sample_variance=cfg.sample_variance)
    else:
        stacked = T.concat([T.reshape(l, (1,)) for l in losses], axis=0)
        total = T.mul(T.tsum(stacked), 1.0 / len(losses))

    value = total.item()
    if not math.isfinite(value):
        raise NumericFailure("non-finite training loss", {
            "aggregate": value, "tasks": per_task, "temperature": temperature})
    T.backward(total)
    if opt_state is not None:
        T.adam_step(params, opt_state)
    return {"aggregate": value, "tasks": per_task, "skipped": skipped}


def predicted_probabilities(spec, logits):
    if spec.kind == "multilabel":
        return T.sigmoid(logits).data
    return T.softmax(logits, temperature=1.0, axis=1).data


def evaluate_split(g, labels, visit_indices, params, enc_cfg, cfg, tasks,
                   temperature):
    """Metrics on an induced split subgraph: no augmentation, dropout off,
    causal-branch predictions."""
    if len(visit_indices) == 0:
        return {}
    sample = induced_on_visits(g, visit_indices)
    report = {}
    encoded = {}

    def reps_for(spec):
        key = "drug" if spec.task_id == "DRUG" else "standard"
        if key not in encoded:
            if key == "drug":
                rows, _ = task_targets(sample, labels, spec)
                view = drop_prescription_edges_for(sample, rows)
            else:
                view = sample
            causal_reps, _ = _encode_view(view, params, enc_cfg, cfg,
                                          temperature, rng=None, training=False)
            encoded[key] = causal_reps
        return encoded[key]

    for spec in tasks:
        rows, y = task_targets(sample, labels, spec)
        if len(rows) == 0:
            continue
        reps = reps_for(spec)
        logits = head_forward(params, spec.task_id, T.gather_rows(reps["visit"], rows))
        prob = predicted_probabilities(spec, logits)
        outputs = prob[:, 1] if spec.kind == "binary" else prob
        report[spec.task_id] = evaluate_task(outputs, y, spec)
    return report


def mean_val_auroc(report):
    """Early-stopping score: mean AUROC over tasks that report one."""
    vals = [m["auroc"] for m in report.values() if "auroc" in m]
    return float(np.mean(vals)) if vals else math.nan


def snapshot_params(params, graph, temperature, epoch):
    """Checkpoint payload: trainable tensors, pretrained node features under
    transe.<type>, and scalar metadata."""
    named = {k: v.data.copy() for k, v in params.items()}
    for t in NODE_TYPES:
        named[f"transe.{t}"] = graph.features[t].copy()
    named["meta.temperature"] = np.array(temperature)
    named["meta.epoch"] = np.array(float(epoch))
    return named


def restore_params(named):
    """Rebuild trainable tensors from a checkpoint payload; returns
    (params, features, meta)."""
    params, features, meta = {}, {}, {}
    for k, v in named.items():
        if k.startswith("transe."):
            features[k.split(".", 1)[1]] = np.asarray(v)
        elif k.startswith("meta."):
            meta[k.split(".", 1)[1]] = float(np.asarray(v).reshape(()))
        else:
            params[k] = T.Tensor(np.asarray(v).copy(), requires_grad=True)
    return params, features, meta


def train_run(g, labels, params, enc_cfg, cfg, tasks, train_visits, val_visits,
              rng, log_path=None):
    """Early-stopped training; keeps the best-mean-validation-AUROC snapshot.

    Writes one JSON line per (epoch, task) with the loss parts plus the
    aggregate when log_path is given.
    """
    cfg.validate()
    if len(val_visits) == 0:
        raise T.ContractError("validation split is empty")
    opt = T.AdamState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    best = TrainResult(best_params=snapshot_params(params, g, 1.0, -1),
                       best_epoch=-1, best_temperature=1.0, best_score=-math.inf)
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(cfg.max_epochs):
            tau = anneal_temperature(epoch, cfg.anneal_rate, cfg.temperature_floor,
                                     cfg.anneal_literal)
            bundle = train_step(g, labels, params, enc_cfg, cfg, tasks, tau, rng,
                                train_visits=train_visits, opt_state=opt)
            val_report = evaluate_split(g, labels, val_visits, params, enc_cfg,
                                        cfg, tasks, tau)
            score = mean_val_auroc(val_report)
            improved = score > best.best_score
            if improved:
                best = TrainResult(best_params=snapshot_params(params, g, tau, epoch),
                                   best_epoch=epoch, best_temperature=tau,
                                   best_score=score, history=best.history)
            best.history.append(EpochReport(
                epoch=epoch, temperature=tau, train_losses=bundle["tasks"],
                aggregate=bundle["aggregate"], val_metrics=val_report,
                val_score=score, best=improved))
            if log_fh:
                for tid, parts in bundle["tasks"].items():
                    log_fh.write(json.dumps({
                        "epoch": epoch, "task": tid,
                        "loss": parts["classification"],
                        "uniform_loss": parts["uniform"],
                        "aggregate": bundle["aggregate"],
                        "temperature": tau, "val_score": score}) + "\n")
            if epoch - max(best.best_epoch, 0) >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    return best
