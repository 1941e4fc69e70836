import math

import numpy as np
import pytest

from conftest import fd_gradient
from lcnn import curvature as C
from lcnn.autodiff import Tape, Tensor, ops
from lcnn.layers import CenteredSoftplus, GammaLipschitzBN, Layer, SpectralDense
from lcnn.model import ArchOptions, Sequential, mlp_small


def linear_model(d=3, classes=2, seed=0):
    layer = SpectralDense(d, classes, normalize=False, seed=seed)
    return Sequential([layer], (d,), classes)


def small_mlp(seed=0, d=5):
    m = mlp_small(d, 3, ArchOptions(beta=3.0), hidden=(8,), seed=seed)
    rng = np.random.default_rng(seed)
    m(rng.normal(size=(16, d)), training=True)
    m.refine()
    return m


def quadratic(a):
    a = np.asarray(a, dtype=float)
    return lambda x: 0.5 * ops.sum(x * ops.matmul(x, a), axis=1)


# -- gradient norm ------------------------------------------------------------------------


def test_grad_norm_of_linear_function():
    w = np.array([3.0, 4.0])
    fn = lambda x: ops.matmul(x, w)
    np.testing.assert_allclose(C.grad_norm(fn, np.array([[1.0, 2.0], [-5.0, 0.1]])), [5.0, 5.0])


def test_grad_norm_of_constant_is_zero():
    fn = lambda x: ops.sum(x * 0.0, axis=1) + 2.0
    assert C.grad_norm(fn, np.ones((2, 3))).tolist() == [0.0, 0.0]


def test_grad_norm_matches_finite_differences():
    m = small_mlp(1)
    x = np.random.default_rng(2).normal(size=(4, 5))
    y = np.array([0, 1, 2, 0])
    got = C.grad_norm(m, x, y)
    for i in range(4):
        f = lambda v: C.objective_values(m, v[None], y[i : i + 1])[0]
        ref = np.linalg.norm(fd_gradient(f, x[i]))
        assert abs(got[i] - ref) / ref < 1e-5


def test_model_objective_needs_target():
    with pytest.raises(ValueError):
        C.grad_norm(small_mlp(), np.zeros((1, 5)))


# -- hessian norm ---------------------------------------------------------------------------


def test_hessian_norm_indefinite_quadratic():
    fn, x = quadratic(np.diag([1.0, -3.0])), np.array([[0.3, 0.7]])
    # default settings stop once successive estimates agree to 1e-4
    assert abs(C.hessian_spectral_norm(fn, x)[0] - 3.0) < 1e-4 * 3.0
    assert abs(C.hessian_spectral_norm(fn, x, iters=50, tol=0.0)[0] - 3.0) < 1e-9


def test_hessian_norm_of_linear_model_is_zero():
    m = linear_model()
    x = np.random.default_rng(0).normal(size=(3, 3))
    assert C.hessian_spectral_norm(m, x, 0, mode="logit").tolist() == [0.0, 0.0, 0.0]


def test_iters_must_be_positive():
    with pytest.raises(ValueError):
        C.hessian_spectral_norm(quadratic(np.eye(2)), np.ones((1, 2)), iters=0)


def dense_hessian(fn, x):
    """Hessian of a single-sample objective, one basis-vector HVP per column."""
    d = x.size
    cols = []
    for i in range(d):
        tape = Tape()
        xt = tape.watch(x[None])
        e = np.zeros((1, d))
        e[0, i] = 1.0
        cols.append(tape.hvp(ops.sum(fn(xt)), xt, e).data[0])
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("seed", range(3))
def test_hessian_norm_matches_dense_svd(seed):
    m = small_mlp(seed)
    x = np.random.default_rng(10 + seed).normal(size=(1, 5))
    fn = C.objective(m, np.array([seed % 3]))
    ref = np.linalg.svd(dense_hessian(fn, x[0]), compute_uv=False)[0]
    est = C.hessian_spectral_norm(fn, x, iters=50, tol=0.0)[0]
    assert abs(est - ref) / ref < 1e-3


def test_power_iteration_monotone_for_spd():
    rng = np.random.default_rng(3)
    b = rng.normal(size=(6, 6))
    a = b @ b.T + 0.1 * np.eye(6)
    hist = []
    C.hessian_spectral_norm(quadratic(a), rng.normal(size=(4, 6)), iters=30, tol=0.0, history=hist)
    seq = np.stack(hist)
    assert np.all(np.diff(seq, axis=0) >= -1e-12)
    np.testing.assert_allclose(seq[-1], np.linalg.eigvalsh(a)[-1], rtol=1e-6)


def test_batched_rows_are_independent():
    m = small_mlp(4)
    x = np.random.default_rng(5).normal(size=(6, 5))
    y = np.arange(6) % 3
    full = C.curvature_report(m, x, y, batch_size=6)
    split = C.curvature_report(m, x, y, batch_size=2)
    np.testing.assert_allclose(full.hessian_norm, split.hessian_norm, rtol=1e-12)


# -- normalized curvature --------------------------------------------------------------------


def test_normalized_curvature_half_square_norm():
    fn = quadratic(np.eye(3))
    got = C.normalized_curvature(fn, np.array([[1.0, 0.0, 0.0]]))[0]
    assert abs(got - 1 / (1 + 1e-6)) < 1e-12


def test_normalized_curvature_linear_is_zero():
    m = linear_model(4, 3)
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.all(C.normalized_curvature(m, x, 1, mode="logit") == 0.0)


def test_scale_invariance():
    m = small_mlp(6)
    x = np.random.default_rng(7).normal(size=(5, 5))
    y = np.array([0, 1, 2, 1, 0])
    # epsilon breaks exact invariance by ~epsilon / ||grad||, so use a steep base function
    ce = C.objective(m, y)
    base = lambda t: ce(t) * 20.0
    scaled = lambda t: base(t) * 7.3
    assert C.grad_norm(base, x).min() > 1.0
    a = C.normalized_curvature(base, x, iters=50, tol=0.0)
    b = C.normalized_curvature(scaled, x, iters=50, tol=0.0)
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError):
        C.normalized_curvature(quadratic(np.eye(2)), np.ones((1, 2)), epsilon=0.0)


def test_report_rows_and_csv(tmp_path):
    m = small_mlp(8)
    x = np.random.default_rng(9).normal(size=(7, 5))
    y = np.arange(7) % 3
    rep = C.curvature_report(m, x, y)
    assert np.array_equal(rep.normalized_curvature, rep.hessian_norm / (rep.grad_norm + rep.epsilon))
    assert rep.bound >= rep.normalized_curvature.max()
    rep.to_csv(tmp_path / "a.csv")
    C.curvature_report(m, x, y).to_csv(tmp_path / "b.csv")
    text = (tmp_path / "a.csv").read_bytes()
    assert text == (tmp_path / "b.csv").read_bytes()
    assert text.splitlines()[0] == b"input_index,grad_norm,hessian_norm,normalized_curvature"
    assert len(text.splitlines()) == 8


# -- data-free bound ---------------------------------------------------------------------------


def test_bound_dense_softplus():
    m = Sequential([SpectralDense(3, 1), CenteredSoftplus(1, beta=2.0)], (3,), 1)
    assert abs(C.theorem1_bound(m) - 2.0) < 1e-12


def test_bound_linear_model_is_zero():
    assert C.theorem1_bound(Sequential([SpectralDense(3, 4), SpectralDense(4, 2)], (3,), 2)) == 0.0


def test_bound_with_gamma_bn():
    bn = GammaLipschitzBN(4, gamma=1.5)
    bn.running_var = np.full(4, 0.1)  # ||BN|| > 1.5 so the clip binds
    m = Sequential([SpectralDense(3, 4), bn, CenteredSoftplus(4, beta=2.0)], (3,), 4)
    assert abs(C.theorem1_bound(m) - 12.0) < 1e-12


def test_bound_rejects_uncertified_layer():
    class Mystery(Layer):
        kind = "mystery"

    with pytest.raises(C.UncertifiedLayerError):
        C.theorem1_bound(Sequential([Mystery()], (1,), 1))


# -- regularizer -----------------------------------------------------------------------------


def regularized_model():
    bn = GammaLipschitzBN(2, gamma=math.e)
    layers = [SpectralDense(2, 2), CenteredSoftplus(2, beta=2.0), bn, CenteredSoftplus(2, beta=3.0)]
    return Sequential(layers, (2,), 2)


def test_regularizer_value():
    m = regularized_model()
    assert abs(C.regularizer(m, 1e-4, 1e-5).item() - 5.1e-4) < 1e-15
    assert C.regularizer(m, 0.0, 0.0).item() == 0.0
    with pytest.raises(ValueError):
        C.regularizer(m, -1.0, 0.0)


def test_regularizer_gradient_wrt_log_beta():
    m = regularized_model()
    act = m.layers[1]
    tape = Tape()
    r = C.regularizer(m, 1e-4, 1e-5, tape)
    g = tape.gradient(r, tape.watch(act.log_beta)).item()
    assert abs(g - 1e-4 * 2.0) < 1e-15

    def f(v):
        act.log_beta.value = np.array(v[0])
        return C.regularizer(m, 1e-4, 1e-5).item()

    fd = fd_gradient(f, np.array([math.log(2.0)]), 1e-6)[0]
    assert abs(g - fd) < 1e-8


# -- robustness bounds --------------------------------------------------------------------------


def test_grad_robustness_bound_values():
    assert C.grad_robustness_bound(2.0, 0.0) == 0.0
    assert abs(C.grad_robustness_bound(2.0, 0.1) - 0.244281) < 1e-6
    assert abs(C.grad_robustness_bound(2.0, 0.1, "quadratic") - 0.2) < 1e-15
    with pytest.raises(ValueError):
        C.grad_robustness_bound(-1.0, 0.1)


def test_output_robustness_bound_values():
    assert C.output_robustness_bound(5.0, 2.0, 0.0) == 0.0
    assert abs(C.output_robustness_bound(5.0, 2.0, 0.1) - 0.561070) < 1e-6
    assert abs(C.output_robustness_bound(5.0, 2.0, 0.1, "quadratic") - 0.55) < 1e-12
    main = C.output_robustness_bound(5.0, 2.0, 0.1, half=False)
    assert abs(main - 0.5 * (1 + 0.2 * math.exp(0.2))) < 1e-12


def test_output_bound_tight_for_linear():
    w = np.array([1.0, -2.0, 2.0])
    x = np.array([0.5, 0.1, -0.3])
    r = 0.2
    e = r * w / np.linalg.norm(w)
    change = abs(w @ (x + e) - w @ x)
    assert abs(change - C.output_robustness_bound(np.linalg.norm(w), 0.0, r)) < 1e-12


def test_tt_discrepancy():
    assert abs(C.tt_discrepancy(10, 12) - 1 / 6) < 1e-12
    assert C.tt_discrepancy(3.3, 3.3) == 0.0 and C.tt_discrepancy(0.0, 0.0) == 0.0
    assert abs(C.tt_discrepancy(12, 10) - 0.2) < 1e-12
    with pytest.raises(ZeroDivisionError):
        C.tt_discrepancy(1.0, 0.0)


# -- one-dimensional chains ----------------------------------------------------------------------


def test_chain_single_function_tight():
    for fn in (C.exp_fn(), C.tanh_fn(), C.cubic_fn(), C.centered_softplus_fn(3.0)):
        res = C.lemma1_check([fn], 0.4)
        assert not res.degenerate and res.lhs == res.rhs


def test_chain_exp_exp_against_autodiff():
    fns = [C.exp_fn(), C.exp_fn()]
    res = C.lemma1_check(fns, 0.0)
    tape = Tape()
    x = tape.watch(np.array(0.0))
    g = tape.gradient(fns[1].f(fns[0].f(x)), x, create_graph=True)
    h = tape.gradient(g, x).item()
    assert abs(res.lhs - abs(h / g.item())) < 1e-12
    # (exp o exp)'' / (exp o exp)' = 1 + exp(x)
    assert abs(res.lhs - 2.0) < 1e-12
    assert res.lhs <= res.rhs


def test_chain_random_against_autodiff():
    rng = np.random.default_rng(0)
    pool = [C.exp_fn, C.tanh_fn, C.cubic_fn, lambda: C.centered_softplus_fn(rng.uniform(0.5, 5))]
    for _ in range(50):
        fns = [pool[i]() for i in rng.integers(0, 4, rng.integers(1, 4))]
        x0 = float(rng.uniform(-1, 1))
        res = C.lemma1_check(fns, x0)
        if res.degenerate:
            continue
        tape = Tape()
        x = tape.watch(np.array(x0))
        y = x
        for fn in fns:
            y = fn.f(y)
        g = tape.gradient(y, x, create_graph=True)
        h = tape.gradient(g, x).item()
        assert abs(res.lhs - abs(h / g.item())) <= 1e-9 * max(1.0, res.lhs)
        assert res.lhs <= res.rhs * (1 + 1e-9)


def test_chain_degenerate_reported():
    square = C.ChainFunction("square", lambda x: x * x, lambda x: 2 * x, lambda x: 2.0)
    res = C.lemma1_check([square], 0.0)
    assert res.degenerate and math.isnan(res.lhs)
    res = C.lemma1_check([C.exp_fn()] * 4, 3.0)  # overflows
    assert res.degenerate


# -- loss versus logit curvature -------------------------------------------------------------------


def test_linear_logits_loss_logit_curvature():
    m = linear_model(3, 2, seed=1)
    x = np.random.default_rng(1).normal(size=(4, 3))
    y = np.array([0, 1, 1, 0])
    c_loss, c_logit = C.loss_logit_curvatures(m, x, y)
    assert np.all(c_logit == 0.0)
    # cross-entropy of linear logits: grad = W^T (p - y), Hess = W^T (diag p - p p^T) W
    w, b = m.layers[0].weight.value, m.layers[0].bias.value
    for i in range(4):
        z = w @ x[i] + b
        p = np.exp(z - z.max())
        p /= p.sum()
        g = w.T @ (p - np.eye(2)[y[i]])
        h = w.T @ (np.diag(p) - np.outer(p, p)) @ w
        ref = np.linalg.norm(h, 2) / (np.linalg.norm(g) + 1e-6)
        assert abs(c_loss[i] - ref) / ref < 1e-9


def test_log_softmax_derivative_bounds():
    rng = np.random.default_rng(0)
    for z0 in rng.normal(scale=4.0, size=(200, 4)):
        tape = Tape()
        z = tape.watch(z0[None])
        for c in range(4):
            lsm = ops.sum(ops.log_softmax(z) * np.eye(4)[c])
            g = tape.gradient(lsm, z, create_graph=True)
            d1 = g.data[0, c]
            d2 = tape.gradient(ops.sum(g * np.eye(4)[c]), z).data[0, c]
            assert abs(d1) <= 1.0 and abs(d2) <= 0.25


def test_random_mlp_loss_logit_finite():
    m = small_mlp(11)
    x = np.random.default_rng(12).normal(size=(5, 5))
    c_loss, c_logit = C.loss_logit_curvatures(m, x, np.arange(5) % 3)
    assert np.all(np.isfinite(c_loss)) and np.all(np.isfinite(c_logit))


# -- neighborhood checks ---------------------------------------------------------------------------


def test_neighborhood_checks_hold_on_random_model():
    m = small_mlp(13)
    x = np.random.default_rng(14).normal(size=(6, 5))
    y = np.arange(6) % 3
    for r in (1e-3, 1e-2, 1e-1):
        for chk in C.neighborhood_checks(m, x, y, r, seed=1):
            assert chk.grad_diff_ratio <= chk.grad_diff_bound * 1.05
            assert chk.grad_norm_ratio <= chk.grad_norm_ratio_bound * 1.05
            assert chk.output_change <= chk.output_bound * 1.05
