"""Losses, SGD with momentum, l2-PGD and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from lcnn.autodiff import NonFiniteError, Tape, Tensor, ops
from lcnn.curvature import regularizer, theorem1_bound
from lcnn.data import Dataset
from lcnn.layers import GammaLipschitzBN
from lcnn.model import Sequential, iter_layers

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "train_loss", "train_acc", "test_acc", "mean_beta", "mean_gamma",
              "theorem1_bound"]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.1
    milestones: tuple[int, ...] | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_beta: float = 0.0
    lambda_gamma: float = 0.0
    lambda_grad: float = 0.0
    grad_penalty: str = "squared"
    adv_epsilon: float = 0.0
    adv_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.milestones is not None:
            self.milestones = tuple(int(m) for m in self.milestones)
        rates = (self.lr, self.lr_decay, self.momentum, self.weight_decay, self.lambda_beta,
                 self.lambda_gamma, self.lambda_grad, self.adv_epsilon)
        if any(r < 0 for r in rates):
            raise ValueError("rates and penalty weights must be non-negative")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("need epochs >= 0 and batch_size >= 2")
        if self.milestones and any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.grad_penalty not in ("squared", "norm"):
            raise ValueError("grad_penalty must be 'squared' or 'norm'")
        if self.adv_steps < 1:
            raise ValueError("adv_steps must be >= 1")

    @property
    def adv_training(self) -> bool:
        return self.adv_epsilon > 0

    def schedule(self) -> tuple[int, ...]:
        """Milestones, defaulting to 3/4 and 7/8 of the run."""
        if self.milestones is not None:
            return self.milestones
        return tuple(sorted({max(1, round(0.75 * self.epochs)), max(1, round(0.875 * self.epochs))}))

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.schedule())


@dataclass
class AttackConfig:
    epsilons: tuple[float, ...] = (0.05, 0.1, 0.15, 0.2)
    steps: int = 10
    step_factor: float = 2.5
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        if not self.epsilons or any(e < 0 for e in self.epsilons):
            raise ValueError("need a non-empty list of non-negative radii")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


# -- loss -------------------------------------------------------------------------------


@dataclass
class LossParts:
    loss: Tensor
    cross_entropy: float
    penalty: float
    grad_penalty: float
    logits: np.ndarray


def total_loss(model: Sequential, x, y, cfg: TrainConfig, tape: Tape,
               training: bool = True) -> LossParts:
    """Mean cross-entropy plus the curvature penalty and the input-gradient penalty.

    The gradient penalty is ``mean_i ||d CE_i / d x_i||^2`` (or the plain norm)
    and is differentiated through by the tape.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty batch")
    xt = tape.watch(x) if cfg.lambda_grad > 0 else Tensor(x)
    logits = model(xt, tape=tape, training=training)
    ce = ops.cross_entropy(logits, y)
    data = ops.mean(ce)
    loss = data
    reg = regularizer(model, cfg.lambda_beta, cfg.lambda_gamma, tape)
    loss = loss + reg
    gp = 0.0
    if cfg.lambda_grad > 0:
        g = tape.gradient(ops.sum(ce), xt, create_graph=True)
        sq = ops.sum(ops.reshape(g * g, (len(x), -1)), axis=1)
        per = sq if cfg.grad_penalty == "squared" else ops.sqrt(sq + 1e-12)
        pen = ops.mean(per)
        gp = pen.item()
        loss = loss + pen * cfg.lambda_grad
    if not math.isfinite(loss.item()):
        raise NonFiniteError("non-finite loss")
    return LossParts(loss, data.item(), reg.item(), gp, logits.data)


# -- optimizer --------------------------------------------------------------------------


@dataclass
class SGDState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


def sgd_step(model: Sequential, grads: dict[str, np.ndarray], state: SGDState, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> SGDState:
    """``v <- m v + g + wd theta``; ``theta <- theta - lr v``.

    Parameters flagged ``decay=False`` (log beta, log gamma) skip weight decay.
    Afterwards log gamma is projected back to >= 0.
    """
    for name, p in model.parameters():
        g = grads.get(name)
        if g is None:
            continue
        if np.shape(g) != p.value.shape:
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, expected {p.value.shape}")
        d = g + weight_decay * p.value if p.decay else np.asarray(g, dtype=np.float64)
        v = state.velocity.get(name)
        v = d if v is None else momentum * v + d
        state.velocity[name] = v
        p.value = p.value - lr * v
    for layer in iter_layers(model.layers):
        if isinstance(layer, GammaLipschitzBN) and layer.log_gamma.value < 0:
            layer.log_gamma.value = np.array(0.0)
    state.steps += 1
    return state


def parameter_gradients(model: Sequential, x, y, cfg: TrainConfig) -> tuple[dict, LossParts]:
    tape = Tape()
    parts = total_loss(model, x, y, cfg, tape)
    named = model.parameters()
    grads = tape.gradient(parts.loss, [tape.watch(p) for _, p in named])
    return {n: g.data for (n, _), g in zip(named, grads)}, parts


# -- attacks ------------------------------------------------------------------------------


def _row_norms(a):
    return np.linalg.norm(a.reshape(len(a), -1), axis=1).reshape((-1,) + (1,) * (a.ndim - 1))


def _project(delta, epsilon):
    n = _row_norms(delta)
    scale = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return delta * scale


def loss_input_gradient(model: Sequential, x, y) -> np.ndarray:
    tape = Tape()
    xt = tape.watch(np.asarray(x, dtype=np.float64))
    ce = ops.cross_entropy(model(xt), y)
    return tape.gradient(ops.sum(ce), xt).data


def pgd_l2(model: Sequential, x, y, epsilon: float, steps: int = 10, step_size: float | None = None,
           random_start: bool = True, seed: int = 0) -> np.ndarray:
    """Normalized-gradient ascent on the cross-entropy inside the l2 ball of radius ``epsilon``.

    The model is evaluated in inference mode.  Default step size is
    ``2.5 * epsilon / steps``.  Zero gradients are replaced by seeded noise.
    """
    x0 = np.asarray(x, dtype=np.float64)
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return x0.copy()
    alpha = 2.5 * epsilon / steps if step_size is None else step_size
    rng = np.random.default_rng(seed)
    delta = np.zeros_like(x0)
    if random_start:
        d = rng.standard_normal(x0.shape)
        d /= _row_norms(d)
        radius = epsilon * rng.random((len(x0),) + (1,) * (x0.ndim - 1)) ** (1.0 / x0[0].size)
        delta = d * radius
    for _ in range(steps):
        g = loss_input_gradient(model, x0 + delta, y)
        n = _row_norms(g)
        zero = n.reshape(-1) == 0
        if zero.any():
            noise = rng.standard_normal(g[zero].shape)
            g[zero] = noise
            n = _row_norms(g)
        delta = _project(delta + alpha * g / n, epsilon)
    return x0 + delta


def adversarial_batch(model: Sequential, x, y, cfg: TrainConfig, seed) -> np.ndarray:
    return pgd_l2(model, x, y, cfg.adv_epsilon, cfg.adv_steps, random_start=False, seed=seed)


def train_step(model: Sequential, x, y, cfg: TrainConfig, state: SGDState, lr: float) -> LossParts:
    grads, parts = parameter_gradients(model, x, y, cfg)
    sgd_step(model, grads, state, lr, cfg.momentum, cfg.weight_decay)
    return parts


def adversarial_train_step(model: Sequential, x, y, cfg: TrainConfig, state: SGDState,
                           lr: float, seed=0) -> LossParts:
    """Replace the batch by its PGD counterpart, then take a normal step."""
    if cfg.adv_training:
        x = adversarial_batch(model, x, y, cfg, seed)
    return train_step(model, x, y, cfg, state, lr)


# -- loop ---------------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    mean_beta: float
    mean_gamma: float
    theorem1_bound: float

    def row(self) -> list:
        return [self.epoch] + [repr(float(getattr(self, k))) for k in LOG_HEADER[1:]]


def _mean(values) -> float:
    return float(np.mean(values)) if values else float("nan")


def train(model: Sequential, train_set: Dataset, test_set: Dataset | None, cfg: TrainConfig,
          log_path=None, refine_steps: int = 100) -> list[EpochRecord]:
    """Train in place; returns one record per epoch and optionally writes the CSV log."""
    rng = np.random.default_rng(cfg.seed)
    state = SGDState()
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch - 1)
        tot_loss = tot_correct = seen = 0.0
        for b, (xb, yb) in enumerate(train_set.batches(cfg.batch_size, rng)):
            if len(xb) < 2:
                continue
            try:
                parts = adversarial_train_step(model, xb, yb, cfg, state, lr,
                                               seed=[cfg.seed, epoch, b])
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}", epoch, b) from exc
            tot_loss += parts.cross_entropy * len(xb)
            tot_correct += float(np.sum(np.argmax(parts.logits, axis=1) == yb))
            seen += len(xb)
        test_acc = model.accuracy(test_set.inputs, test_set.labels) if test_set else float("nan")
        rec = EpochRecord(epoch, tot_loss / seen, tot_correct / seen, test_acc,
                          _mean(model.betas()), _mean(model.gammas()), theorem1_bound(model))
        history.append(rec)
        log.info("epoch %d loss %.4f train %.3f test %.3f", epoch, rec.train_loss,
                 rec.train_acc, rec.test_acc)
    model.refine(refine_steps)
    if log_path is not None:
        write_log(history, log_path)
    return history


def write_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for rec in history:
            w.writerow(rec.row())


def evaluate(model: Sequential, dataset: Dataset, attack: AttackConfig | None = None,
             batch_size: int = 256) -> dict:
    """Clean accuracy plus robust accuracy for each radius.

    A point counts as robust at radius ``e`` only if no attack at any listed
    radius ``<= e`` fooled it, since those perturbations also lie in the
    larger ball.
    """
    x, y = dataset.inputs, dataset.labels
    correct = np.argmax(model.predict(x), axis=1) == y
    table = {"clean": float(np.mean(correct))}
    if attack is None:
        return table
    alive = correct.copy()
    for k, eps in sorted(enumerate(attack.epsilons), key=lambda t: t[1]):
        for lo in range(0, len(x), batch_size):
            sl = slice(lo, lo + batch_size)
            xa = pgd_l2(model, x[sl], y[sl], eps, attack.steps,
                        step_size=attack.step_factor * eps / attack.steps,
                        random_start=attack.random_start, seed=[attack.seed, k, lo])
            alive[sl] &= np.argmax(model.predict(xa), axis=1) == y[sl]
        table[eps] = float(np.mean(alive))
    return table


def config_dict(cfg) -> dict:
    return asdict(cfg)
