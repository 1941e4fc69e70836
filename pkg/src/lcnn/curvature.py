"""Gradient norms, Hessian spectral norms and normalized curvature.

Every estimator works on a batch of inputs at once.  The scalar objective is
evaluated per sample on an inference-mode model, so the Hessian of the summed
objective is block diagonal and one Hessian-vector product per power-iteration
step serves the whole batch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from lcnn.autodiff import Tape, Tensor, ops
from lcnn.layers import CenteredSoftplus, GammaLipschitzBN, Residual, tensor_of
from lcnn.model import Sequential, iter_layers

EPSILON = 1e-6
HESSIAN_ITERS = 20
HESSIAN_TOL = 1e-4
ZERO_HESSIAN = 1e-12

Objective = Callable[[Tensor], Tensor]


class UncertifiedLayerError(TypeError):
    pass


def objective(model: Sequential, target, mode: str = "loss") -> Objective:
    """Per-sample scalar function of the input.

    ``mode="loss"`` is the cross-entropy against ``target``; ``mode="logit"``
    is the logit of class ``target``.
    """
    target = np.asarray(target, dtype=np.int64).reshape(-1)

    def loss_fn(x: Tensor) -> Tensor:
        labels = np.broadcast_to(target, (x.shape[0],)) if target.size == 1 else target
        return ops.cross_entropy(model(x), labels)

    def logit_fn(x: Tensor) -> Tensor:
        labels = np.broadcast_to(target, (x.shape[0],)) if target.size == 1 else target
        mask = ops.one_hot(labels, model.num_classes)
        return ops.sum(model(x) * mask, axis=1)

    if mode == "loss":
        return loss_fn
    if mode == "logit":
        return logit_fn
    raise ValueError(f"unknown curvature mode {mode!r}")


def _resolve(model, target, mode) -> Objective:
    if isinstance(model, Sequential):
        if target is None:
            raise ValueError("a target label is required for a model objective")
        return objective(model, target, mode)
    if callable(model):
        return model
    raise TypeError("model must be a Sequential or a per-sample scalar callable")


def _row_norms(a: np.ndarray) -> np.ndarray:
    return np.linalg.norm(a.reshape(len(a), -1), axis=1)


def _start_vectors(shape, seed: int, offset: int) -> np.ndarray:
    rows = []
    for i in range(shape[0]):
        v = np.random.default_rng([seed, offset + i]).standard_normal(shape[1:])
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows)


def _evaluate(fn: Objective, x: np.ndarray):
    tape = Tape()
    xt = tape.watch(x)
    out = fn(xt)
    if out.shape != (x.shape[0],):
        raise ValueError(f"objective must return one scalar per sample, got {out.shape}")
    return tape, xt, out


def input_gradient(model, x, target=None, mode: str = "loss") -> np.ndarray:
    fn = _resolve(model, target, mode)
    x = np.asarray(x, dtype=np.float64)
    tape, xt, out = _evaluate(fn, x)
    return tape.gradient(ops.sum(out), xt).data


def objective_values(model, x, target=None, mode: str = "loss") -> np.ndarray:
    fn = _resolve(model, target, mode)
    return fn(Tensor(np.asarray(x, dtype=np.float64))).data


def grad_norm(model, x, target=None, mode: str = "loss") -> np.ndarray:
    """Per-sample ``||grad_x f||_2``."""
    return _row_norms(input_gradient(model, x, target, mode))


def _power_iteration(tape, xt, g, iters, seed, tol, offset, history=None):
    n = xt.shape[0]
    v = _start_vectors(xt.shape, seed, offset)
    est = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    for k in range(iters):
        hv = tape.gradient(ops.sum(g * v), xt).data
        norms = _row_norms(hv)
        zero = norms < ZERO_HESSIAN
        converged = np.abs(norms - est) < tol * norms if k > 0 else np.zeros(n, dtype=bool)
        active = ~done
        est[active] = np.where(zero[active], 0.0, norms[active])
        if history is not None:
            history.append(est.copy())
        done |= active & (zero | converged)
        upd = ~done
        if not upd.any():
            break
        scale = norms[upd].reshape((-1,) + (1,) * (hv.ndim - 1))
        v[upd] = hv[upd] / scale
    return est


def geometry(model, x, target=None, mode: str = "loss", iters: int = HESSIAN_ITERS,
             seed: int = 0, tol: float = HESSIAN_TOL, offset: int = 0, history=None):
    """Per-sample (gradient norm, Hessian spectral norm) from one tape."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    fn = _resolve(model, target, mode)
    x = np.asarray(x, dtype=np.float64)
    tape, xt, out = _evaluate(fn, x)
    g = tape.gradient(ops.sum(out), xt, create_graph=True)
    gn = _row_norms(g.data)
    hn = _power_iteration(tape, xt, g, iters, seed, tol, offset, history)
    return gn, hn


def hessian_spectral_norm(model, x, target=None, iters: int = HESSIAN_ITERS, seed: int = 0,
                          mode: str = "loss", tol: float = HESSIAN_TOL, offset: int = 0,
                          history: list | None = None) -> np.ndarray:
    """Per-sample ``||Hess_x f||_2`` by power iteration on Hessian-vector products.

    Iterates ``v <- Hv / ||Hv||`` and returns the last ``||Hv||``, which
    converges to the largest absolute eigenvalue even for indefinite Hessians.
    Rows stop early once successive estimates agree to ``tol`` (relative);
    ``tol=0`` always runs ``iters`` steps.  Start vectors are drawn from the
    stream ``(seed, offset + row)``.
    """
    return geometry(model, x, target, mode, iters, seed, tol, offset, history)[1]


def curvature_ratio(hessian_norm, grad_norm_, epsilon: float = EPSILON) -> np.ndarray:
    h = np.asarray(hessian_norm, dtype=np.float64)
    g = np.asarray(grad_norm_, dtype=np.float64)
    if epsilon > 0:
        return h / (g + epsilon)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(h == 0, 0.0, h / g)


def normalized_curvature(model, x, target=None, iters: int = HESSIAN_ITERS, seed: int = 0,
                         epsilon: float = EPSILON, mode: str = "loss",
                         tol: float = HESSIAN_TOL) -> np.ndarray:
    """Per-sample ``||Hess f|| / (||grad f|| + epsilon)``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    gn, hn = geometry(model, x, target, mode, iters, seed, tol)
    return curvature_ratio(hn, gn, epsilon)


@dataclass
class CurvatureReport:
    grad_norm: np.ndarray
    hessian_norm: np.ndarray
    normalized_curvature: np.ndarray
    epsilon: float
    bound: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rows(self):
        return list(zip(self.grad_norm, self.hessian_norm, self.normalized_curvature))

    def means(self) -> dict[str, float]:
        return {
            "grad_norm": float(np.mean(self.grad_norm)),
            "hessian_norm": float(np.mean(self.hessian_norm)),
            "normalized_curvature": float(np.mean(self.normalized_curvature)),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["input_index", "grad_norm", "hessian_norm", "normalized_curvature"])
            for i, (g, h, c) in enumerate(self.rows):
                w.writerow([i, repr(float(g)), repr(float(h)), repr(float(c))])


def curvature_report(model, x, target=None, mode: str = "loss", iters: int = HESSIAN_ITERS,
                     seed: int = 0, epsilon: float = EPSILON, tol: float = HESSIAN_TOL,
                     batch_size: int = 256, with_bound: bool = True) -> CurvatureReport:
    x = np.asarray(x, dtype=np.float64)
    target_arr = None if target is None else np.asarray(target).reshape(-1)
    gns, hns = [], []
    for lo in range(0, len(x), batch_size):
        tgt = target_arr
        if target_arr is not None and target_arr.size > 1:
            tgt = target_arr[lo : lo + batch_size]
        gn, hn = geometry(model, x[lo : lo + batch_size], tgt, mode, iters, seed, tol, offset=lo)
        gns.append(gn)
        hns.append(hn)
    gn, hn = np.concatenate(gns), np.concatenate(hns)
    bound = theorem1_bound(model) if with_bound and isinstance(model, Sequential) else None
    return CurvatureReport(gn, hn, curvature_ratio(hn, gn, epsilon), epsilon, bound,
                           {"mode": mode, "iters": iters, "seed": seed})


def _bound_terms(layers, prod: float) -> tuple[float, float]:
    total = 0.0
    for layer in layers:
        if isinstance(layer, Residual):
            inner, inner_prod = _bound_terms(layer.branch, prod)
            total += inner
            prod = prod + inner_prod
            continue
        try:
            cert = layer.certificate()
        except NotImplementedError as exc:
            raise UncertifiedLayerError(f"layer {layer.kind!r} has no certificate") from exc
        prod *= cert.lipschitz
        if cert.curvature > 0:
            total += cert.width * cert.curvature * prod
    return total, prod


def theorem1_bound(model: Sequential) -> float:
    """Data-free curvature bound ``sum_i n_i * beta_i * prod_{j<=i} L_j``.

    Linear layers contribute only through the Lipschitz product.
    """
    return _bound_terms(model.layers, 1.0)[0]


def regularizer(model: Sequential, lambda_beta: float, lambda_gamma: float,
                tape: Tape | None = None) -> Tensor:
    """``lambda_beta * sum(beta) + lambda_gamma * sum(log gamma)``, differentiable on ``tape``."""
    if lambda_beta < 0 or lambda_gamma < 0:
        raise ValueError("regularization weights must be non-negative")
    total = Tensor(0.0)
    for layer in iter_layers(model.layers):
        if isinstance(layer, CenteredSoftplus) and lambda_beta > 0:
            total = total + ops.exp(tensor_of(layer.log_beta, tape)) * lambda_beta
        elif isinstance(layer, GammaLipschitzBN) and layer.clip and lambda_gamma > 0:
            total = total + tensor_of(layer.log_gamma, tape) * lambda_gamma
    return total


# -- robustness bounds ----------------------------------------------------------


def grad_robustness_bound(curvature: float, radius: float, mode: str = "exact") -> float:
    """Bound on ``||grad f(x+e) - grad f(x)|| / ||grad f(x)||`` for ``||e|| = radius``.

    ``exact``: ``r d exp(r d)`` with ``d`` the maximal curvature nearby;
    ``quadratic``: ``r C_f(x)``.
    """
    if radius < 0 or curvature < 0:
        raise ValueError("radius and curvature must be non-negative")
    rd = radius * curvature
    if mode == "exact":
        return rd * math.exp(rd)
    if mode == "quadratic":
        return rd
    raise ValueError(f"unknown mode {mode!r}")


def output_robustness_bound(grad_norm_: float, curvature: float, radius: float,
                            mode: str = "exact", half: bool = True) -> float:
    """Bound on ``|f(x+e) - f(x)|``.

    ``r ||grad f|| (1 + c r d exp(r d))`` (exact) or ``r ||grad f|| (1 + c r C)``
    (quadratic) with ``c = 1/2``; ``half=False`` drops the 1/2.
    """
    if min(grad_norm_, curvature, radius) < 0:
        raise ValueError("arguments must be non-negative")
    coef = 0.5 if half else 1.0
    rd = radius * curvature
    if mode == "exact":
        return radius * grad_norm_ * (1.0 + coef * rd * math.exp(rd))
    if mode == "quadratic":
        return radius * grad_norm_ * (1.0 + coef * rd)
    raise ValueError(f"unknown mode {mode!r}")


def tt_discrepancy(g_train: float, g_test: float) -> float:
    """``|(g_test - g_train) / g_test|``; two zero statistics agree exactly."""
    if g_test == 0 and g_train == 0:
        return 0.0
    if g_test == 0:
        raise ZeroDivisionError("test statistic is zero")
    return abs((g_test - g_train) / g_test)


# -- one-dimensional chains --------------------------------------------------------


@dataclass(frozen=True)
class ChainFunction:
    """Scalar map with closed-form first and second derivatives.

    ``f`` accepts and returns Tensors so chains can also be differentiated
    by the tape.
    """

    name: str
    f: Callable[[Tensor], Tensor]
    df: Callable[[float], float]
    d2f: Callable[[float], float]

    def value(self, x: float) -> float:
        return self.f(Tensor(x)).item()


def _sig(z):
    return float(ops._sigmoid(np.array([z]))[0])


def exp_fn() -> ChainFunction:
    return ChainFunction("exp", ops.exp, math.exp, math.exp)


def tanh_fn() -> ChainFunction:
    return ChainFunction("tanh", ops.tanh, lambda x: 1 - math.tanh(x) ** 2,
                         lambda x: -2 * math.tanh(x) * (1 - math.tanh(x) ** 2))


def cubic_fn() -> ChainFunction:
    return ChainFunction("cubic", lambda x: x + ops.power(x, 3) * (1.0 / 3.0),
                         lambda x: 1 + x * x, lambda x: 2 * x)


def centered_softplus_fn(beta: float) -> ChainFunction:
    from lcnn.layers import centered_softplus

    return ChainFunction(
        f"centered_softplus({beta:g})",
        lambda x: centered_softplus(x, beta),
        lambda x: _sig(beta * x),
        lambda x: beta * _sig(beta * x) * _sig(-beta * x),
    )


class Lemma1Result(NamedTuple):
    lhs: float
    rhs: float
    degenerate: bool


def lemma1_check(fns: list[ChainFunction], x: float) -> Lemma1Result:
    """Compare ``|f''/f'|`` of ``f_L o ... o f_1`` at ``x`` with the layer-wise bound.

    The bound is ``sum_i |f_i''/f_i'| prod_{j<i} |f_j'|`` with each derivative
    taken at that layer's own input.  Vanishing or non-finite derivatives
    give ``degenerate=True`` with NaN sides.
    """
    points = [float(x)]
    d1, d2 = [], []
    try:
        for fn in fns:
            d1.append(fn.df(points[-1]))
            d2.append(fn.d2f(points[-1]))
            points.append(fn.value(points[-1]))
    except (OverflowError, FloatingPointError, ArithmeticError):
        return Lemma1Result(math.nan, math.nan, True)
    vals = d1 + d2 + points
    if any(not math.isfinite(v) for v in vals) or any(d == 0 for d in d1):
        return Lemma1Result(math.nan, math.nan, True)

    first = math.prod(d1)
    second = 0.0
    for i in range(len(fns)):
        before = math.prod(d1[:i])
        after = math.prod(d1[i + 1 :])
        second += d2[i] * before * before * after
    lhs = abs(second / first)
    rhs = sum(abs(d2[i] / d1[i]) * math.prod(abs(d) for d in d1[:i]) for i in range(len(fns)))
    return Lemma1Result(lhs, rhs, False)


def loss_logit_curvatures(model: Sequential, x, target, iters: int = HESSIAN_ITERS, seed: int = 0,
                          epsilon: float = EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample loss curvature and the maximum per-logit curvature over classes."""
    c_loss = normalized_curvature(model, x, target, iters, seed, epsilon, mode="loss")
    per_class = [normalized_curvature(model, x, c, iters, seed, epsilon, mode="logit")
                 for c in range(model.num_classes)]
    return c_loss, np.max(np.stack(per_class), axis=0)


# -- sampled-neighborhood checks ------------------------------------------------------


@dataclass
class NeighborhoodCheck:
    """Measured quantities and bounds at one (input, perturbation) pair."""

    radius: float
    delta: float
    grad_diff_ratio: float
    grad_norm_ratio: float
    output_change: float
    grad_norm: float

    @property
    def grad_diff_bound(self) -> float:
        return grad_robustness_bound(self.delta, self.radius, "exact")

    @property
    def grad_norm_ratio_bound(self) -> float:
        return math.exp(self.radius * self.delta)

    @property
    def output_bound(self) -> float:
        return output_robustness_bound(self.grad_norm, self.delta, self.radius, "exact")


def neighborhood_checks(model, x, target, radius: float, samples: int = 16, seed: int = 0,
                        mode: str = "loss", iters: int = HESSIAN_ITERS) -> list[NeighborhoodCheck]:
    """Measure the gradient/output bounds for one random direction per input.

    The maximal curvature ``delta`` is estimated over ``samples`` points on
    the segment from ``x`` to ``x + e`` (all inside the ball), using the
    ratio without the epsilon stabilizer.  Inputs with a zero gradient are
    skipped.
    """
    fn = _resolve(model, target, mode)
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    tgt = None if target is None else np.asarray(target).reshape(-1)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal(x.shape)
    dirs *= radius / _row_norms(dirs).reshape((-1,) + (1,) * (x.ndim - 1))
    ts = np.linspace(0.0, 1.0, samples)
    pts = np.concatenate([x + t * dirs for t in ts])

    def tiled(times):
        if not isinstance(model, Sequential):
            return fn
        return objective(model, np.tile(tgt, times) if tgt.size > 1 else tgt, mode)

    gn, hn = geometry(tiled(samples), pts, iters=iters, seed=seed)
    delta = curvature_ratio(hn, gn, 0.0).reshape(samples, n).max(axis=0)

    pair = np.concatenate([x, x + dirs])
    grads = input_gradient(tiled(2), pair)
    g0, g1 = grads[:n], grads[n:]
    vals = objective_values(tiled(2), pair)
    out = []
    for i in range(n):
        g0n = float(np.linalg.norm(g0[i]))
        if g0n == 0:
            continue
        out.append(NeighborhoodCheck(
            radius=radius,
            delta=float(delta[i]),
            grad_diff_ratio=float(np.linalg.norm(g1[i] - g0[i]) / g0n),
            grad_norm_ratio=float(np.linalg.norm(g1[i]) / g0n),
            output_change=float(abs(vals[n + i] - vals[i])),
            grad_norm=g0n,
        ))
    return out
