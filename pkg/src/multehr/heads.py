"""Task readout heads and every supervised objective: stabilized binary and
categorical cross-entropy, the per-task loss with its noise regularizer, and
the variance-penalized multi-task aggregate.

Binary tasks use 2-logit cross-entropy; the multilabel drug task uses
per-label binary cross-entropy (sum over labels, mean over nodes).  Each
task owns a 2-layer readout MLP plus a separate trivial-branch readout of
the same shape.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .causal import uniform_loss
from .encoder import _glorot

TASK_ORDER = ("READM", "MORT", "DRUG", "LOS")
_TASK_KINDS = {"READM": "binary", "MORT": "binary", "LOS": "multiclass", "DRUG": "multilabel"}
_TASK_LETTER = {"R": "READM", "M": "MORT", "D": "DRUG", "L": "LOS"}


@dataclass
class TaskSpec:
    task_id: str
    kind: str
    n_classes: int
    lam: float = 1.0

    def validate(self):
        if self.kind not in ("binary", "multiclass", "multilabel"):
            raise T.ContractError(f"unknown task kind {self.kind!r}")
        if self.lam < 0:
            raise T.ContractError("uniform-loss coefficient must be >= 0")
        if self.kind == "binary" and self.n_classes != 2:
            raise T.ContractError("binary tasks use 2-logit cross-entropy")
        return self


def make_task_specs(letters, drug_vocab_size, lam=1.0, los_classes=10):
    """Build specs from a task-letter string such as 'R' or 'RMDL', in the
    fixed step order READM, MORT, DRUG, LOS."""
    wanted = set()
    for ch in letters.upper():
        if ch not in _TASK_LETTER:
            raise T.ContractError(f"unknown task letter {ch!r} (use R/M/D/L)")
        wanted.add(_TASK_LETTER[ch])
    specs = []
    for tid in TASK_ORDER:
        if tid not in wanted:
            continue
        n_c = {"binary": 2, "multiclass": los_classes, "multilabel": drug_vocab_size}[_TASK_KINDS[tid]]
        specs.append(TaskSpec(task_id=tid, kind=_TASK_KINDS[tid], n_classes=n_c, lam=lam).validate())
    return specs


def init_head_params(specs, d, rng, dropout=0.2):
    """Readout MLPs (and trivial-branch twins): d -> d -> n_classes."""
    params = {}
    for spec in specs:
        for branch in ("", "triv."):
            pre = f"head.{spec.task_id}.{branch}"
            params[pre + "w1"] = T.Tensor(_glorot(rng, (d, d)), requires_grad=True)
            params[pre + "b1"] = T.Tensor(np.zeros(d), requires_grad=True)
            params[pre + "w2"] = T.Tensor(_glorot(rng, (d, spec.n_classes)), requires_grad=True)
            params[pre + "b2"] = T.Tensor(np.zeros(spec.n_classes), requires_grad=True)
    return params


def head_forward(params, task_id, reps, rng=None, training=False, dropout=0.2,
                 trivial=False):
    """Two affine layers with GELU and dropout between them."""
    pre = f"head.{task_id}.{'triv.' if trivial else ''}"
    h = T.gelu(T.add(T.matmul(reps, params[pre + "w1"]), params[pre + "b1"]))
    if training and dropout > 0:
        h = T.dropout(h, dropout, rng, training=True)
    return T.add(T.matmul(h, params[pre + "w2"]), params[pre + "b2"])


def bce_loss(logits, labels):
    """Multilabel binary cross-entropy, averaged over nodes and labels,
    computed in the max(z,0) - z*y + log(1+exp(-|z|)) stable form.

    Label-mean (not sum) keeps the drug task's loss on the same scale as the
    other tasks, which the cross-task variance penalty requires.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise T.ShapeMismatchError(
            f"bce_loss shapes differ: logits {logits.shape}, labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise T.ContractError("bce_loss labels must be 0 or 1")
    z = logits
    abs_z = T.mul(z, T.Tensor(np.sign(z.data)))
    per = T.add(T.sub(T.relu(z), T.mul(z, T.Tensor(labels))),
                T.log(T.add(T.Tensor(np.ones(z.shape)), T.exp(T.mul(abs_z, -1.0)))))
    return T.tmean(T.tmean(per, axis=1))


def ce_loss(logits, labels):
    """Categorical cross-entropy over class-id labels, log-sum-exp shifted."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise T.ShapeMismatchError(f"ce_loss expects {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise T.ContractError(f"class ids must lie in [0, {c})")
    shift = T.Tensor(logits.data.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.log(T.tsum(T.exp(z), axis=1, keepdims=True))
    logp = T.sub(z, lse)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return T.mul(T.tmean(T.tsum(T.mul(logp, T.Tensor(onehot)), axis=1)), -1.0)


def task_loss(spec, causal_logits, trivial_logits, labels, rng, fixed_uniform=False):
    """Classification loss on the causal branch plus lam times the uniform
    loss on the trivial branch.  Returns (scalar Tensor, float parts)."""
    if spec.kind == "multilabel":
        cls = bce_loss(causal_logits, labels)
    else:
        cls = ce_loss(causal_logits, labels)
    if spec.lam == 0:
        return cls, {"classification": cls.item(), "uniform": 0.0}
    unif = uniform_loss(trivial_logits, rng,
                        kind="multilabel" if spec.kind == "multilabel" else "categorical",
                        fixed_uniform=fixed_uniform)
    total = T.add(cls, T.mul(unif, spec.lam))
    return total, {"classification": cls.item(), "uniform": unif.item()}


def multitask_aggregate(losses, beta=1.0, sample_variance=False):
    """Var({L_k}) + (beta/K) * sum L_k over the realized task losses.

    Population variance by default (divide by K); the sample variant is a
    flag for comparison and needs K >= 2.
    """
    if not losses:
        raise T.ContractError("multitask_aggregate needs at least one task loss")
    k = len(losses)
    stacked = T.concat([T.reshape(l, (1,)) for l in losses], axis=0)
    var = T.variance(stacked)
    if sample_variance:
        if k < 2:
            raise T.ContractError("sample variance needs at least two tasks")
        var = T.mul(var, k / (k - 1.0))
    return T.add(var, T.mul(T.tsum(stacked), beta / k))
