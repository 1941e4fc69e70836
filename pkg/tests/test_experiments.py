import csv

import numpy as np
import pytest

from lcnn import curvature
from lcnn.checkpoint import load_checkpoint, read_manifest
from lcnn.experiments import (
    ExperimentSpec,
    bound_audit,
    class_changes_per_row,
    cmd_geometry,
    cmd_train,
    decision_grid,
    grad_robustness,
    load_dataset,
    run_training,
    variant_settings,
)
from lcnn.layers import SpectralDense
from lcnn.model import Sequential, mlp_small


@pytest.fixture(scope="module")
def moons_pair():
    out = {}
    for variant in ("standard", "lcnn"):
        model, _, splits = run_training(ExperimentSpec(dataset="two-moons", variant=variant))
        out[variant] = (model, splits)
    return out


def linear_model():
    layer = SpectralDense(2, 2, normalize=False)
    layer.weight.value = np.array([[1.0, -2.0], [0.5, 0.25]])
    layer.bias.value = np.array([0.1, -0.3])
    return Sequential([layer], (2,), 2)


def test_variant_wiring():
    opts, lam = variant_settings("standard")
    assert not opts.spectral and not opts.gamma_bn and opts.beta == 1e3 and not opts.learn_beta
    assert lam["lambda_beta"] == lam["lambda_gamma"] == lam["lambda_grad"] == 0.0
    _, lam = variant_settings("lcnn")
    assert (lam["lambda_beta"], lam["lambda_gamma"], lam["lambda_grad"]) == (1e-4, 1e-5, 0.0)
    _, lam = variant_settings("lcnn+gradreg")
    assert (lam["lambda_beta"], lam["lambda_gamma"], lam["lambda_grad"]) == (1e-4, 1e-5, 1e-3)
    opts, lam = variant_settings("advtrain")
    assert lam["adv_epsilon"] == 0.1 and lam["adv_steps"] == 3 and not opts.spectral
    with pytest.raises(ValueError):
        ExperimentSpec(variant="dropout")


def test_standard_moons_accuracy(moons_pair):
    model, (_, test_set) = moons_pair["standard"]
    assert model.accuracy(test_set.inputs, test_set.labels) > 0.95


def test_lcnn_moons_flatter_at_same_accuracy(moons_pair):
    stats = {}
    for variant, (model, (_, test_set)) in moons_pair.items():
        cf = curvature.normalized_curvature(model, test_set.inputs, test_set.labels)
        stats[variant] = (model.accuracy(test_set.inputs, test_set.labels), cf.mean())
    assert stats["standard"][0] - stats["lcnn"][0] <= 0.02
    assert stats["standard"][1] >= 3 * stats["lcnn"][1]


def test_lcnn_decision_boundary_is_smoother(moons_pair):
    changes = {}
    for variant, (model, _) in moons_pair.items():
        _, pred, _ = decision_grid(model, 100)
        changes[variant] = class_changes_per_row(pred, 100)
    assert changes["lcnn"].sum() < changes["standard"].sum()


def test_lcnn_gradients_more_stable(moons_pair):
    rows = {}
    for variant, (model, (_, test_set)) in moons_pair.items():
        rows[variant] = grad_robustness(model, test_set.inputs[:200], test_set.labels[:200],
                                        np.logspace(-3, -1, 5))
    assert all(a[1] < b[1] for a, b in zip(rows["lcnn"], rows["standard"]))


def test_lcnn_audit_slack(moons_pair):
    model, (_, test_set) = moons_pair["lcnn"]
    res = bound_audit(model, test_set.inputs[:100])
    assert res.violations == 0 and res.slack >= 1


def test_geometry_rows_are_consistent(moons_pair, tmp_path):
    model, (train_set, test_set) = moons_pair["lcnn"]
    cmd_geometry(model, train_set.subset(np.arange(50)), test_set.subset(np.arange(50)), tmp_path)
    with open(tmp_path / "curvature_test.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        cf = float(r["hessian_norm"]) / (float(r["grad_norm"]) + curvature.EPSILON)
        assert abs(float(r["normalized_curvature"]) - cf) <= 1e-12 * max(1.0, cf)


def test_linear_model_geometry_is_flat(tmp_path):
    # flat in the logits; the softmax still curves the cross-entropy
    train_set, test_set = load_dataset("two-moons", 0, n_train=40, n_test=40)
    res = cmd_geometry(linear_model(), train_set, test_set, tmp_path, mode="logit")
    with open(res["geometry"], newline="") as fh:
        for r in csv.DictReader(fh):
            assert float(r["mean_hessian_norm"]) == 0.0
            assert float(r["mean_normalized_curvature"]) == 0.0
    rows = grad_robustness(linear_model(), test_set.inputs, test_set.labels, [1e-3, 1e-1],
                           mode="logit")
    assert all(diff == 0.0 and quad == 0.0 for _, diff, quad in rows)
    loss_mode = cmd_geometry(linear_model(), train_set, test_set, tmp_path)
    with open(loss_mode["geometry"], newline="") as fh:
        assert all(float(r["mean_hessian_norm"]) > 0 for r in csv.DictReader(fh))


def test_grad_robustness_vanishes_with_radius(moons_pair):
    model, (_, test_set) = moons_pair["lcnn"]
    rows = grad_robustness(model, test_set.inputs[:50], test_set.labels[:50], [1e-8, 1e-1])
    assert rows[0][1] < 1e-6 < rows[1][1]
    with pytest.raises(ValueError):
        grad_robustness(model, test_set.inputs[:5], test_set.labels[:5], [1e-1, 1e-3])


def test_decision_grid_deterministic_and_needs_2d(moons_pair):
    model, _ = moons_pair["standard"]
    a, b = decision_grid(model, 7), decision_grid(model, 7)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    with pytest.raises(ValueError):
        decision_grid(mlp_small(3, 2, hidden=(4,)), 5)


def test_checkpoint_reproduces_recorded_accuracy(tmp_path):
    spec = ExperimentSpec(dataset="two-moons", variant="lcnn", out_dir=str(tmp_path),
                          train={"epochs": 3})
    res = cmd_train(spec)
    model, meta = load_checkpoint(res["checkpoint"])
    _, test_set = load_dataset("two-moons", 0)
    assert abs(model.accuracy(test_set.inputs, test_set.labels) - meta["test_accuracy"]) <= 1e-4
    assert read_manifest(res["checkpoint"])["format_version"] == 1
