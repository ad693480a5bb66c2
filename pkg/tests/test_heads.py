import math

import numpy as np
import pytest

from multehr import tensor as T
from multehr.heads import (TaskSpec, bce_loss, ce_loss, head_forward,
                           init_head_params, make_task_specs, multitask_aggregate,
                           task_loss)


def test_make_task_specs_order_and_shapes():
    specs = make_task_specs("LRDM", drug_vocab_size=37)
    assert [s.task_id for s in specs] == ["READM", "MORT", "DRUG", "LOS"]
    by_id = {s.task_id: s for s in specs}
    assert by_id["READM"].n_classes == 2
    assert by_id["LOS"].n_classes == 10
    assert by_id["DRUG"].n_classes == 37
    with pytest.raises(T.ContractError):
        make_task_specs("RX", drug_vocab_size=5)


def test_bce_hand_values():
    assert abs(bce_loss(T.Tensor([[0.0]]), [[1]]).item() - math.log(2.0)) <= 1e-12
    assert bce_loss(T.Tensor([[30.0]]), [[1]]).item() <= 1e-12
    one = bce_loss(T.Tensor([[0.3, -1.2]]), [[1, 0]]).item()
    two = bce_loss(T.Tensor([[0.3, -1.2], [0.3, -1.2]]), [[1, 0], [1, 0]]).item()
    assert abs(one - two) <= 1e-12  # mean over nodes


def test_bce_rejects_bad_labels():
    with pytest.raises(T.ContractError):
        bce_loss(T.Tensor([[0.0]]), [[2]])
    with pytest.raises(T.ShapeMismatchError):
        bce_loss(T.Tensor([[0.0]]), [[1, 0]])


def test_ce_hand_values():
    assert abs(ce_loss(T.Tensor([[0.0, 0.0]]), [0]).item() - math.log(2.0)) <= 1e-12
    hot = np.zeros((1, 5))
    hot[0, 2] = 30.0
    assert ce_loss(T.Tensor(hot), [2]).item() <= 1e-12
    uniform = ce_loss(T.Tensor(np.zeros((4, 10))), [0, 3, 7, 9]).item()
    assert abs(uniform - math.log(10.0)) <= 1e-9
    assert ce_loss(T.Tensor(np.random.default_rng(0).normal(size=(6, 4))),
                   [0, 1, 2, 3, 0, 1]).item() >= 0.0


def test_ce_rejects_out_of_range():
    with pytest.raises(T.ContractError):
        ce_loss(T.Tensor(np.zeros((2, 3))), [0, 3])


def test_loss_gradients_match_finite_difference(rng):
    for _ in range(20):
        z = rng.normal(size=(3, 4))
        y_ce = rng.integers(0, 4, size=3)
        err = T.finite_diff_check(lambda t: ce_loss(t, y_ce), T.Tensor(z), 1e-3)
        assert err <= 1e-4
        y_ml = rng.integers(0, 2, size=(3, 4))
        err = T.finite_diff_check(lambda t: bce_loss(t, y_ml), T.Tensor(z), 1e-3)
        assert err <= 1e-4


def test_task_loss_lambda_behavior():
    spec0 = TaskSpec("READM", "binary", 2, lam=0.0)
    spec1 = TaskSpec("READM", "binary", 2, lam=1.0)
    spec2 = TaskSpec("READM", "binary", 2, lam=2.0)
    logits = T.Tensor([[0.4, -0.2], [0.1, 0.3]])
    triv = T.Tensor([[1.0, -1.0], [0.2, 0.0]])
    labels = [0, 1]

    l0, parts0 = task_loss(spec0, logits, triv, labels, np.random.default_rng(3))
    assert abs(l0.item() - ce_loss(logits, labels).item()) <= 1e-12
    assert parts0["uniform"] == 0.0

    l1, parts1 = task_loss(spec1, logits, triv, labels, np.random.default_rng(3))
    l2, parts2 = task_loss(spec2, logits, triv, labels, np.random.default_rng(3))
    assert abs((l2.item() - l0.item()) - 2.0 * (l1.item() - l0.item())) <= 1e-12
    assert abs(parts1["uniform"] - parts2["uniform"]) <= 1e-12


def test_task_loss_zero_js_when_draw_matches():
    # trivial softmax equals the noise draw the same seed will produce
    from multehr.causal import sample_noise_distribution
    y = sample_noise_distribution(np.random.default_rng(11), (2, 2))
    spec = TaskSpec("MORT", "binary", 2, lam=1.0)
    logits = T.Tensor([[0.4, -0.2], [0.1, 0.3]])
    total, parts = task_loss(spec, logits, T.Tensor(np.log(y)), [0, 1],
                             np.random.default_rng(11))
    assert parts["uniform"] <= 1e-10
    assert abs(total.item() - parts["classification"]) <= 1e-10


def test_multitask_aggregate_values():
    one = multitask_aggregate([T.Tensor([3.7])], beta=1.0)
    assert abs(one.item() - 3.7) <= 1e-12
    same = multitask_aggregate([T.Tensor([1.0]), T.Tensor([1.0])], beta=1.0)
    assert abs(same.item() - 1.0) <= 1e-12
    spread = multitask_aggregate([T.Tensor([0.0]), T.Tensor([2.0])], beta=1.0)
    assert abs(spread.item() - 2.0) <= 1e-12
    with pytest.raises(T.ContractError):
        multitask_aggregate([], beta=1.0)


def test_multitask_aggregate_invariants(rng):
    for _ in range(25):
        vals = rng.uniform(0, 3, size=4)
        beta = rng.uniform(0.2, 2.0)
        agg = multitask_aggregate([T.Tensor([v]) for v in vals], beta=beta).item()
        assert agg >= (beta / 4) * vals.sum() - 1e-12
        c = rng.uniform(-1, 1)
        shifted = multitask_aggregate([T.Tensor([v + c]) for v in vals], beta=beta).item()
        assert abs((shifted - agg) - beta * c) <= 1e-10
    equal = multitask_aggregate([T.Tensor([1.3])] * 3, beta=0.7).item()
    assert abs(equal - 0.7 * 1.3) <= 1e-12


def test_multitask_aggregate_sample_variance_flag():
    pop = multitask_aggregate([T.Tensor([0.0]), T.Tensor([2.0])], beta=0.0).item()
    samp = multitask_aggregate([T.Tensor([0.0]), T.Tensor([2.0])], beta=0.0,
                               sample_variance=True).item()
    assert abs(pop - 1.0) <= 1e-12 and abs(samp - 2.0) <= 1e-12


def test_multitask_aggregate_gradient(rng):
    def f(x):
        parts = [T.reshape(T.slice_axis(x, 0, i, i + 1), (1,)) for i in range(4)]
        return multitask_aggregate(parts, beta=0.8)

    for _ in range(10):
        assert T.finite_diff_check(f, T.Tensor(rng.uniform(0, 2, size=4)), 1e-3) <= 1e-4


def test_head_forward_shapes_and_trivial_branch(rng):
    specs = make_task_specs("RL", drug_vocab_size=9)
    params = init_head_params(specs, d=6, rng=rng)
    reps = T.Tensor(rng.normal(size=(5, 6)))
    for spec in specs:
        main = head_forward(params, spec.task_id, reps)
        triv = head_forward(params, spec.task_id, reps, trivial=True)
        assert main.shape == (5, spec.n_classes)
        assert triv.shape == (5, spec.n_classes)
        assert not np.allclose(main.data, triv.data)
