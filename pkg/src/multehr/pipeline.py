"""Orchestration of full experiments: data resolution, splits, pretraining,
training, evaluation, cross-validation, explanation and embedding export.
The CLI wraps these functions; they are importable for tests.
"""

import hashlib
import itertools
import json
import os

import numpy as np
import pandas as pd

from . import tensor as T
from .causal import init_score_params
from .config import ConfigError, config_from_dict, config_to_dict, echo_config
from .data import (DataError, extract_labels, ingest_csv, split_patients,
                   synth_generate, write_tables_csv)
from .encoder import init_encoder_params
from .graph import NODE_TYPES, build_graph, induced_on_visits
from .heads import init_head_params, make_task_specs
from .metrics import aggregate_fold_reports, report_to_csv_rows, report_to_json
from .pretrain import features_from_params, pretrain_run
from .training import (evaluate_split, mean_val_auroc, restore_params,
                       snapshot_params, train_run)
from .causal import dual_encode, compute_masks
from .encoder import encode


def _seed_streams(seed, n=4):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def resolve_data(cfg):
    """(tables, labels, partition or None) from CSVs or the synthetic generator."""
    if cfg.data_dir:
        tables = ingest_csv(cfg.data_dir)
        partition = None
        if cfg.split.mode == "partition":
            if not cfg.split.partition_file:
                raise ConfigError("split.mode=partition needs split.partition_file")
            partition = pd.read_csv(cfg.split.partition_file, dtype=str)
    else:
        out = synth_generate(cfg.synth)
        tables = out.tables
        partition = out.patient_partition if cfg.split.mode == "partition" else None
    labels = extract_labels(tables, cfg.readm_window_days)
    return tables, labels, partition


def resolve_splits(cfg, tables, partition, rng):
    """Patient-level split resolved to visit index arrays (graph dense order)."""
    visits = tables.visits.reset_index(drop=True)
    patient_of_visit = visits["patient_id"].tolist()
    patients = tables.patients["patient_id"].tolist()

    if cfg.split.mode == "partition":
        if partition is None:
            raise ConfigError("partition split requested but no partition table found")
        part = dict(zip(partition["patient_id"], partition["partition"]))
        missing = [p for p in patients if p not in part]
        if missing:
            raise DataError(f"partition file misses patients: {missing[:5]}")
        test_p = {p for p in patients if part[p] == "test"}
        pool = [p for p in patients if part[p] != "test"]
        order = rng.permutation(len(pool))
        n_val = max(1, int(round(len(pool) * cfg.split.val_fraction)))
        val_p = {pool[i] for i in order[:n_val]}
        train_p = set(pool) - val_p
    else:
        order = rng.permutation(len(patients))
        n_train = int(round(len(patients) * cfg.split.train_fraction))
        n_val = max(1, int(round(len(patients) * cfg.split.val_fraction)))
        train_p = {patients[i] for i in order[:n_train]}
        val_p = {patients[i] for i in order[n_train:n_train + n_val]}
        test_p = set(patients) - train_p - val_p

    def rows(pset):
        return np.array([i for i, p in enumerate(patient_of_visit) if p in pset],
                        dtype=np.int64)

    return {"train": rows(train_p), "val": rows(val_p), "test": rows(test_p)}


def build_pretrained_graph(cfg, tables, rng):
    g = build_graph(tables, include_lab_events=cfg.include_lab_events,
                    feature_dim=cfg.feature_dim)
    params, trace = pretrain_run(g, cfg.pretrain, rng)
    for t, m in features_from_params(g, params).items():
        g.features[t][:] = m
    return g, params, trace


def build_model_params(cfg, tasks, rng):
    return {**init_encoder_params(cfg.encoder, rng),
            **init_score_params(cfg.feature_dim, rng),
            **init_head_params(tasks, cfg.feature_dim, rng)}


def run_synth(cfg, out_dir):
    """Write synthetic tables, the patient partition, and a seed manifest."""
    os.makedirs(out_dir, exist_ok=True)
    out = synth_generate(cfg.synth)
    write_tables_csv(out.tables, out_dir)
    out.patient_partition.to_csv(os.path.join(out_dir, "splits.csv"), index=False)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(out.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def run_training(cfg, out_dir=None):
    """ingest -> graph -> pretrain -> train -> test evaluation.

    Returns a dict with the result object, reports and artifact paths; when
    out_dir is given, writes checkpoint, metrics.json, the JSON-lines
    training log, and the resolved config.
    """
    rng_split, rng_pre, rng_model, rng_train = _seed_streams(cfg.seed)
    tables, labels, partition = resolve_data(cfg)
    splits = resolve_splits(cfg, tables, partition, rng_split)
    if len(splits["train"]) == 0 or len(splits["val"]) == 0:
        raise DataError("empty train or validation split")
    g, _, pre_trace = build_pretrained_graph(cfg, tables, rng_pre)
    tasks = make_task_specs(cfg.tasks, len(labels.drug_vocab), lam=cfg.lam)
    params = build_model_params(cfg, tasks, rng_model)

    log_path = os.path.join(out_dir, "train_log.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        if os.path.exists(log_path):
            os.remove(log_path)
    result = train_run(g, labels, params, cfg.encoder, cfg.train, tasks,
                       splits["train"], splits["val"], rng_train, log_path=log_path)

    best_params, feats, meta = restore_params(result.best_params)
    g_best = g.with_features({t: feats[t] for t in NODE_TYPES})
    test_report = evaluate_split(g_best, labels, splits["test"], best_params,
                                 cfg.encoder, cfg.train, tasks,
                                 meta["temperature"]) if len(splits["test"]) else {}
    val_report = evaluate_split(g_best, labels, splits["val"], best_params,
                                cfg.encoder, cfg.train, tasks, meta["temperature"])
    metrics = {
        "best_epoch": result.best_epoch,
        "best_temperature": result.best_temperature,
        "val_mean_auroc": result.best_score,
        "val": val_report,
        "test": test_report,
        "epochs_run": len(result.history),
        "pretrain_final_loss": pre_trace[-1] if pre_trace else None,
    }
    artifacts = {"result": result, "metrics": metrics, "graph": g_best,
                 "labels": labels, "tasks": tasks, "splits": splits, "config": cfg}
    if out_dir:
        ckpt = os.path.join(out_dir, "checkpoint.ckpt")
        T.save_checkpoint(ckpt, result.best_params)
        report_to_json(metrics, os.path.join(out_dir, "metrics.json"))
        echo_config(cfg, os.path.join(out_dir, "config.json"))
        artifacts["checkpoint"] = ckpt
    return artifacts


def load_model(checkpoint_path):
    named = T.load_checkpoint(checkpoint_path)
    return restore_params(named)


def run_eval(cfg, checkpoint_path, split_name="test", out_path=None):
    """Metrics for a stored checkpoint on one split of the configured data."""
    rng_split, _, _, _ = _seed_streams(cfg.seed)
    tables, labels, partition = resolve_data(cfg)
    splits = resolve_splits(cfg, tables, partition, rng_split)
    params, feats, meta = load_model(checkpoint_path)
    g = build_graph(tables, include_lab_events=cfg.include_lab_events,
                    feature_dim=cfg.feature_dim)
    for t in NODE_TYPES:
        g.features[t][:] = feats[t]
    tasks = make_task_specs(cfg.tasks, len(labels.drug_vocab), lam=cfg.lam)
    report = evaluate_split(g, labels, splits[split_name], params, cfg.encoder,
                            cfg.train, tasks, meta["temperature"])
    if out_path:
        report_to_json(report, out_path)
    return report


def run_cv(cfg, out_dir):
    """Patient-level k-fold driver: per-fold training plus a mean/std summary.

    MULTEHR_THREADS > 1 runs folds in worker processes over disjoint
    subdirectories.
    """
    threads = max(1, int(os.environ.get("MULTEHR_THREADS", "1")))
    if cfg.deterministic:
        threads = 1
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(config_to_dict(cfg), fold, os.path.join(out_dir, f"fold{fold}"))
            for fold in range(cfg.folds)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_run_cv_fold, jobs))
    else:
        reports = [_run_cv_fold(job) for job in jobs]

    rows = []
    for fold, rep in enumerate(reports):
        rows.extend(report_to_csv_rows(fold, rep))
    with open(os.path.join(out_dir, "folds.csv"), "w") as fh:
        fh.write("fold,task,metric,value\n")
        for fold, task, metric, value in rows:
            fh.write(f"{fold},{task},{metric},{value:.10g}\n")
    summary = aggregate_fold_reports(reports)
    report_to_json(summary, os.path.join(out_dir, "summary.json"))
    return summary


def _run_cv_fold(job):
    payload, fold, fold_dir = job
    cfg = config_from_dict(payload)
    rng_split, rng_pre, rng_model, rng_train = _seed_streams(cfg.seed * 1000 + fold)
    tables, labels, _ = resolve_data(cfg)
    assignment = split_patients(tables, cfg.folds, seed=cfg.seed)
    visits = tables.visits.reset_index(drop=True)
    fold_of_visit = visits["patient_id"].map(assignment).to_numpy()
    val_fold = (fold + 1) % cfg.folds
    splits = {
        "test": np.flatnonzero(fold_of_visit == fold),
        "val": np.flatnonzero(fold_of_visit == val_fold),
        "train": np.flatnonzero((fold_of_visit != fold) & (fold_of_visit != val_fold)),
    }
    g, _, _ = build_pretrained_graph(cfg, tables, rng_pre)
    tasks = make_task_specs(cfg.tasks, len(labels.drug_vocab), lam=cfg.lam)
    params = build_model_params(cfg, tasks, rng_model)
    os.makedirs(fold_dir, exist_ok=True)
    result = train_run(g, labels, params, cfg.encoder, cfg.train, tasks,
                       splits["train"], splits["val"], rng_train,
                       log_path=os.path.join(fold_dir, "train_log.jsonl"))
    best_params, feats, meta = restore_params(result.best_params)
    g_best = g.with_features({t: feats[t] for t in NODE_TYPES})
    report = evaluate_split(g_best, labels, splits["test"], best_params,
                            cfg.encoder, cfg.train, tasks, meta["temperature"])
    T.save_checkpoint(os.path.join(fold_dir, "checkpoint.ckpt"), result.best_params)
    report_to_json(report, os.path.join(fold_dir, "metrics.json"))
    return report


def run_explain(cfg, checkpoint_path, visit_id, k, out_path=None, dump_path=None):
    """Top-k diagnosis edges of one visit by final-layer attention, summed
    over heads on the causal pass; ties broken by diagnosis id."""
    tables, labels, _ = resolve_data(cfg)
    params, feats, meta = load_model(checkpoint_path)
    g = build_graph(tables, include_lab_events=cfg.include_lab_events,
                    feature_dim=cfg.feature_dim)
    for t in NODE_TYPES:
        g.features[t][:] = feats[t]
    visit_index = {v: i for i, v in enumerate(g.node_ids["visit"])}
    if visit_id not in visit_index:
        raise DataError(f"unknown visit id {visit_id!r}")
    row = visit_index[visit_id]

    sample = induced_on_visits(g, np.arange(g.node_count("visit")))
    sink = {}
    tensor_feats = {t: T.Tensor(sample.graph.features[t])
                    for t in NODE_TYPES if sample.graph.node_count(t)}
    if cfg.train.causal_enabled:
        mask = compute_masks(sample, tensor_feats, params, meta["temperature"])
        dual_encode(sample, cfg.encoder, params, mask, temperature=meta["temperature"],
                    feats=tensor_feats, attn_sink=sink)
    else:
        encode(sample, cfg.encoder, params, feats=tensor_feats,
               temperature=meta["temperature"], attn_sink=sink)

    entries = []
    for rec in sink.get("visit", []):
        if rec["edge_type"] != "diagnosis_visit":
            continue
        hit = rec["dst"] == row
        for src, per_head in zip(rec["src"][hit], rec["effective"][hit]):
            entries.append({
                "diagnosis": sample.graph.node_ids["diagnosis"][src],
                "score": float(per_head.sum()),
                "per_head": per_head.tolist(),
            })
    entries.sort(key=lambda e: (-e["score"], e["diagnosis"]))
    top = entries[:k]
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("visit,diagnosis,attention_score\n")
            for e in top:
                fh.write(f"{visit_id},{e['diagnosis']},{e['score']:.10g}\n")
    if dump_path:
        with open(dump_path, "w") as fh:
            json.dump({"visit": visit_id, "edges": entries}, fh, indent=2)
            fh.write("\n")
    return top


def run_export_embeddings(cfg, checkpoint_path, out_path):
    """Final-layer causal representations for every node:
    (node_type, external_id, dense_index, then feature_dim columns)."""
    tables, labels, _ = resolve_data(cfg)
    params, feats, meta = load_model(checkpoint_path)
    g = build_graph(tables, include_lab_events=cfg.include_lab_events,
                    feature_dim=cfg.feature_dim)
    for t in NODE_TYPES:
        g.features[t][:] = feats[t]
    sample = induced_on_visits(g, np.arange(g.node_count("visit")))
    tensor_feats = {t: T.Tensor(sample.graph.features[t])
                    for t in NODE_TYPES if sample.graph.node_count(t)}
    if cfg.train.causal_enabled:
        mask = compute_masks(sample, tensor_feats, params, meta["temperature"])
        reps, _ = dual_encode(sample, cfg.encoder, params, mask,
                              temperature=meta["temperature"], feats=tensor_feats)
    else:
        reps = encode(sample, cfg.encoder, params, feats=tensor_feats,
                      temperature=meta["temperature"])
    d = cfg.feature_dim
    with open(out_path, "w") as fh:
        fh.write("node_type,external_id,dense_index," +
                 ",".join(f"e{i}" for i in range(d)) + "\n")
        for t in NODE_TYPES:
            n = sample.graph.node_count(t)
            if not n:
                continue
            mat = reps[t].data
            for i in range(n):
                vals = ",".join(f"{x:.10g}" for x in mat[i])
                fh.write(f"{t},{sample.graph.node_ids[t][i]},{i},{vals}\n")
    return out_path


def run_sweep(cfg, out_dir):
    """Grid driver: cfg.sweep maps dotted config paths to value lists; each
    combination trains into its own subdirectory."""
    if not cfg.sweep:
        raise ConfigError("sweep requested but config.sweep is empty")
    os.makedirs(out_dir, exist_ok=True)
    keys = sorted(cfg.sweep)
    grids = [cfg.sweep[k] for k in keys]
    rows = []
    for combo in itertools.product(*grids):
        payload = config_to_dict(cfg)
        payload["sweep"] = {}
        name_bits = []
        for key, value in zip(keys, combo):
            node = payload
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
            name_bits.append(f"{key.replace('.', '_')}={value}")
        name = "__".join(name_bits)
        sub_cfg = config_from_dict(payload)
        artifacts = run_training(sub_cfg, out_dir=os.path.join(out_dir, name))
        row = {"run": name, **{k: v for k, v in zip(keys, combo)}}
        for task, metrics in artifacts["metrics"]["test"].items():
            for metric, value in metrics.items():
                if metric != "n":
                    row[f"{task}.{metric}"] = value
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(out_dir, "sweep_summary.csv"), index=False)
    return frame


def checksum_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
