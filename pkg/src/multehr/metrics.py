"""Evaluation metrics computed from sorted arrays: AUROC (Mann-Whitney with
half credit for ties), non-interpolated average precision, accuracy,
support-weighted F1, and multilabel Jaccard.

Undefined values (single-class AUROC, zero-positive AUPR) come back as NaN
and are left out of reports rather than zero-filled.  Multiclass AUROC is
support-weighted one-vs-rest; multilabel AUROC/AUPR are micro-averaged over
all (node, label) cells, with set metrics thresholded at 0.5.
"""

import json
import math

import numpy as np


def _tie_averaged_ranks(scores):
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """P(score+ > score-) + 0.5 P(tie); NaN when a class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = _tie_averaged_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_multiclass(prob, labels):
    """Support-weighted one-vs-rest AUROC over classes present in labels."""
    prob = np.asarray(prob, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    total = 0.0
    weight = 0.0
    for c in np.unique(labels):
        val = auroc(prob[:, c], (labels == c).astype(np.int64))
        if math.isnan(val):
            continue
        support = float((labels == c).sum())
        total += support * val
        weight += support
    return total / weight if weight else math.nan


def aupr(scores, labels):
    """Average precision: step-wise precision change at each ranked positive,
    with tied scores handled as one threshold group; NaN without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return math.nan
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp_new = int(y[i:j + 1].sum())
        fp_new = (j - i + 1) - tp_new
        tp += tp_new
        fp += fp_new
        if tp_new:
            ap += tp_new * (tp / (tp + fp))
        i = j + 1
    return float(ap / n_pos)


def accuracy(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if len(pred) == 0:
        raise ValueError("accuracy of an empty sample")
    return float((pred == true).mean())


def weighted_f1(pred, true):
    """Per-class F1 (0 when precision+recall is 0), weighted by true support."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if len(true) == 0:
        raise ValueError("weighted_f1 of an empty sample")
    if len(pred) != len(true):
        raise ValueError("weighted_f1 length mismatch")
    total = 0.0
    for c in np.unique(true):
        tp = int(((pred == c) & (true == c)).sum())
        fp = int(((pred == c) & (true != c)).sum())
        fn = int(((pred != c) & (true == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        total += f1 * ((true == c).sum() / len(true))
    return float(total)


def jaccard_multilabel(pred_sets, true_sets):
    """Mean |intersection| / |union| per sample; 1 when both sets are empty."""
    if len(pred_sets) != len(true_sets):
        raise ValueError("jaccard length mismatch")
    vals = []
    for p, t in zip(pred_sets, true_sets):
        p, t = set(p), set(t)
        union = p | t
        vals.append(1.0 if not union else len(p & t) / len(union))
    return float(np.mean(vals)) if vals else math.nan


def evaluate_task(outputs, labels, spec):
    """Task-appropriate metric dict.

    binary: outputs are positive-class probabilities -> AUROC, AUPR.
    multiclass: outputs are (n, C) probabilities -> accuracy, AUROC, F1.
    multilabel: outputs are (n, L) probabilities -> AUROC, AUPR, Jaccard,
    with 0.5 decision threshold for the set metric.
    """
    out = {"n": int(len(labels))}
    if spec.kind == "binary":
        scores = np.asarray(outputs, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        for name, val in (("auroc", auroc(scores, y)), ("aupr", aupr(scores, y))):
            if not math.isnan(val):
                out[name] = val
    elif spec.kind == "multiclass":
        prob = np.asarray(outputs, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        pred = prob.argmax(axis=1)
        out["accuracy"] = accuracy(pred, y)
        val = auroc_multiclass(prob, y)
        if not math.isnan(val):
            out["auroc"] = val
        out["f1"] = weighted_f1(pred, y)
    elif spec.kind == "multilabel":
        prob = np.asarray(outputs, dtype=np.float64)
        y = np.asarray(labels, dtype=np.int64)
        flat_s, flat_y = prob.reshape(-1), y.reshape(-1)
        for name, val in (("auroc", auroc(flat_s, flat_y)), ("aupr", aupr(flat_s, flat_y))):
            if not math.isnan(val):
                out[name] = val
        pred_sets = [set(np.flatnonzero(row >= 0.5).tolist()) for row in prob]
        true_sets = [set(np.flatnonzero(row).tolist()) for row in y]
        out["jaccard"] = jaccard_multilabel(pred_sets, true_sets)
    else:
        raise ValueError(f"unknown task kind {spec.kind!r}")
    return out


def report_to_json(report, path=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def report_to_csv_rows(fold, report):
    """One (fold, task, metric, value) row per defined metric."""
    rows = []
    for task, metrics in sorted(report.items()):
        for metric, value in sorted(metrics.items()):
            if metric == "n":
                continue
            rows.append((fold, task, metric, value))
    return rows


def aggregate_fold_reports(reports):
    """Mean and standard deviation per (task, metric) across folds."""
    acc = {}
    for rep in reports:
        for task, metrics in rep.items():
            for metric, value in metrics.items():
                if metric == "n":
                    continue
                acc.setdefault(task, {}).setdefault(metric, []).append(value)
    return {task: {metric: {"mean": float(np.mean(v)), "std": float(np.std(v)),
                            "n_folds": len(v)}
                   for metric, v in metrics.items()}
            for task, metrics in acc.items()}
