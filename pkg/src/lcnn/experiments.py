"""Variant wiring and the experiment routines behind the command line."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from lcnn import curvature
from lcnn.checkpoint import load_checkpoint, save_checkpoint
from lcnn.data import Dataset, blobs, digits, load_idx, moons_split
from lcnn.model import ARCHITECTURES, ArchOptions, Sequential
from lcnn.training import AttackConfig, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

VARIANTS = ("standard", "gradreg", "lcnn", "lcnn+gradreg", "advtrain")

LAMBDA_BETA = 1e-4
LAMBDA_GAMMA = 1e-5
LAMBDA_GRAD = 1e-3
RELU_BETA = 1e3
ADV_EPSILON = 0.1
ADV_STEPS = 3
LCNN_BETA = 10.0
LCNN_GAMMA = 1.0


def variant_settings(variant: str) -> tuple[ArchOptions, dict]:
    """Architecture switches and penalty weights implied by a variant name."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    low_curv = variant.startswith("lcnn")
    if low_curv:
        opts = ArchOptions(spectral=True, gamma_bn=True, beta=LCNN_BETA, gamma=LCNN_GAMMA,
                           learn_beta=True)
    else:
        opts = ArchOptions(spectral=False, gamma_bn=False, beta=RELU_BETA, learn_beta=False)
    lam = {
        "lambda_beta": LAMBDA_BETA if low_curv else 0.0,
        "lambda_gamma": LAMBDA_GAMMA if low_curv else 0.0,
        "lambda_grad": LAMBDA_GRAD if variant.endswith("gradreg") else 0.0,
        "adv_epsilon": ADV_EPSILON if variant == "advtrain" else 0.0,
        "adv_steps": ADV_STEPS,
    }
    return opts, lam


@dataclass
class ExperimentSpec:
    command: str = "train"
    arch: str | None = None
    variant: str = "standard"
    dataset: str = "two-moons"
    out_dir: str = "runs"
    checkpoint: str | None = None
    train: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    arch_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.arch is None:
            self.arch = "mlp-small" if self.dataset == "two-moons" else "cnn-small"
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")

    def train_config(self) -> TrainConfig:
        _, lam = variant_settings(self.variant)
        cfg = dict(DATASET_DEFAULTS.get(self.dataset, {}))
        cfg.update(lam)
        cfg.update(self.train)
        return TrainConfig(**cfg)

    def attack_config(self) -> AttackConfig:
        return AttackConfig(**self.attack)

    def options(self) -> ArchOptions:
        opts, _ = variant_settings(self.variant)
        return replace(opts, **self.arch_options)


DATASET_DEFAULTS = {
    "two-moons": {"epochs": 30, "batch_size": 64},
    "digits": {"epochs": 30, "batch_size": 64},
    "blobs": {"epochs": 20, "batch_size": 64},
}


def load_dataset(name: str, seed: int = 0, **kw) -> tuple[Dataset, Dataset]:
    """Train/test splits.  Two-moons inputs are standardized with train statistics."""
    if name == "two-moons":
        train_set, test_set = moons_split(kw.get("n_train", 1000), kw.get("n_test", 1000),
                                          kw.get("noise_std", 0.1), seed)
        train_set = train_set.standardized()
        return train_set, test_set.standardized(train_set.mean, train_set.std)
    if name == "digits":
        return digits(kw.get("test_fraction", 1 / 3), seed)
    if name == "blobs":
        return (blobs(kw.get("n_train", 1000), seed=seed, split="train"),
                blobs(kw.get("n_test", 500), seed=seed + 1, split="test"))
    if name == "idx":
        paths = [kw.get(k) for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if not all(paths):
            raise ValueError("the idx dataset needs train/test image and label paths in the config")
        return (load_idx(paths[0], paths[1], "train", kw.get("num_classes")),
                load_idx(paths[2], paths[3], "test", kw.get("num_classes")))
    raise ValueError(f"unknown dataset {name!r}")


def build_model(arch: str, input_shape, num_classes: int, opts: ArchOptions, seed: int) -> Sequential:
    if arch == "mlp-small":
        if len(input_shape) != 1:
            raise ValueError("mlp-small expects flat inputs")
        return ARCHITECTURES[arch](input_shape[0], num_classes, opts, seed=seed)
    if len(input_shape) != 3:
        raise ValueError("cnn-small expects (channels, height, width) inputs")
    return ARCHITECTURES[arch](tuple(input_shape), num_classes, opts, seed=seed)


def run_training(spec: ExperimentSpec, log_path=None):
    cfg = spec.train_config()
    train_set, test_set = load_dataset(spec.dataset, cfg.seed, **spec.data)
    model = build_model(spec.arch, train_set.input_shape, train_set.num_classes, spec.options(),
                        cfg.seed)
    model.meta.update({"variant": spec.variant, "dataset": spec.dataset})
    history = train(model, train_set, test_set, cfg, log_path)
    return model, history, (train_set, test_set)


def cmd_train(spec: ExperimentSpec) -> dict:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{spec.dataset}_{spec.variant}"
    cfg = spec.train_config()
    model, history, (_, test_set) = run_training(spec, out / f"{stem}_log.csv")
    acc = model.accuracy(test_set.inputs, test_set.labels)
    ckpt = save_checkpoint(model, spec.checkpoint or out / stem, {
        "test_accuracy": acc, "train_config": asdict(cfg), "seed": cfg.seed,
    })
    return {"checkpoint": str(ckpt), "log": str(out / f"{stem}_log.csv"), "test_accuracy": acc}


# -- evaluation commands ----------------------------------------------------------------


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


GEOMETRY_HEADER = ["split", "mean_grad_norm", "mean_hessian_norm", "mean_normalized_curvature",
                   "accuracy"]
DISCREPANCY_HEADER = ["metric", "train", "test", "delta_tt"]


def geometry_table(model: Sequential, train_set: Dataset, test_set: Dataset, seed: int = 0,
                   mode: str = "loss", max_points: int | None = None) -> dict:
    """Mean geometry and accuracy per split, plus train/test discrepancies."""
    rows = {}
    for split, ds in (("train", train_set), ("test", test_set)):
        n = len(ds) if max_points is None else min(max_points, len(ds))
        rep = curvature.curvature_report(model, ds.inputs[:n], ds.labels[:n], mode=mode, seed=seed)
        m = rep.means()
        rows[split] = {**m, "accuracy": model.accuracy(ds.inputs, ds.labels), "report": rep}
    disc = {k: curvature.tt_discrepancy(rows["train"][k], rows["test"][k])
            for k in ("grad_norm", "hessian_norm", "normalized_curvature")}
    return {"rows": rows, "delta_tt": disc}


def cmd_geometry(model: Sequential, train_set, test_set, out_dir, seed=0, mode="loss",
                 max_points=None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = geometry_table(model, train_set, test_set, seed, mode, max_points)
    _write_csv(out / "geometry.csv", GEOMETRY_HEADER, [
        [s, r["grad_norm"], r["hessian_norm"], r["normalized_curvature"], r["accuracy"]]
        for s, r in res["rows"].items()])
    _write_csv(out / "discrepancy.csv", DISCREPANCY_HEADER, [
        [k, res["rows"]["train"][k], res["rows"]["test"][k], v] for k, v in res["delta_tt"].items()])
    for s, r in res["rows"].items():
        r["report"].to_csv(out / f"curvature_{s}.csv")
    return {"geometry": str(out / "geometry.csv"), "discrepancy": str(out / "discrepancy.csv"),
            "delta_tt": res["delta_tt"],
            "mean_normalized_curvature": {s: r["normalized_curvature"] for s, r in res["rows"].items()}}


GRAD_ROBUSTNESS_HEADER = ["radius", "mean_relative_grad_diff", "mean_quadratic_bound"]


def grad_robustness(model: Sequential, x, y, radii, directions: int = 1, seed: int = 0,
                    mode: str = "loss") -> list[tuple[float, float, float]]:
    """Mean ``||g(x+e) - g(x)|| / ||g(x)||`` over inputs and random directions, with ``r C_f(x)``."""
    radii = [float(r) for r in radii]
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be sorted ascending")
    x = np.asarray(x, dtype=np.float64)
    g0 = curvature.input_gradient(model, x, y, mode)
    n0 = np.linalg.norm(g0.reshape(len(x), -1), axis=1)
    keep = n0 > 0
    x, y, g0, n0 = x[keep], np.asarray(y)[keep], g0[keep], n0[keep]
    cf = curvature.normalized_curvature(model, x, y, seed=seed, mode=mode)
    rng = np.random.default_rng(seed)
    rows = []
    for r in radii:
        vals = []
        for _ in range(directions):
            d = rng.standard_normal(x.shape)
            d *= r / np.linalg.norm(d.reshape(len(x), -1), axis=1).reshape((-1,) + (1,) * (x.ndim - 1))
            g1 = curvature.input_gradient(model, x + d, y, mode)
            vals.append(np.linalg.norm((g1 - g0).reshape(len(x), -1), axis=1) / n0)
        rows.append((r, float(np.mean(vals)), float(np.mean(r * cf))))
    return rows


def cmd_grad_robustness(model, dataset: Dataset, radii, out_dir, seed=0, max_points=None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(dataset) if max_points is None else min(max_points, len(dataset))
    rows = grad_robustness(model, dataset.inputs[:n], dataset.labels[:n], radii, seed=seed)
    _write_csv(out / "grad_robustness.csv", GRAD_ROBUSTNESS_HEADER, rows)
    return rows


def attack_columns(epsilons) -> list[str]:
    return ["clean"] + [f"eps_{e:g}" for e in epsilons]


def cmd_attack(model, dataset: Dataset, attack: AttackConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = evaluate(model, dataset, attack)
    _write_csv(out / "attack.csv", attack_columns(attack.epsilons),
               [[table["clean"]] + [table[e] for e in attack.epsilons]])
    return table


BOUNDARY_HEADER = ["x", "y", "predicted_class", "max_softmax"]


def decision_grid(model: Sequential, resolution: int = 200,
                  bounds: tuple[float, float, float, float] = (-3.0, 3.0, -3.0, 3.0)):
    """Rows ``(x, y, class, max softmax)`` over a regular grid, x varying fastest."""
    if model.input_shape != (2,):
        raise ValueError(f"decision grids need a 2-D input model, got input shape {model.input_shape}")
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    xs = np.linspace(bounds[0], bounds[1], resolution)
    ys = np.linspace(bounds[2], bounds[3], resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    logits = model.predict(pts)
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return pts, np.argmax(logits, axis=1), p.max(axis=1)


def class_changes_per_row(pred: np.ndarray, resolution: int) -> np.ndarray:
    grid = pred.reshape(resolution, resolution)
    return np.sum(grid[:, 1:] != grid[:, :-1], axis=1)


def cmd_decision_boundary(model, out_dir, resolution=200, bounds=(-3.0, 3.0, -3.0, 3.0)) -> str:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pts, cls, pmax = decision_grid(model, resolution, bounds)
    _write_csv(out / "decision_boundary.csv", BOUNDARY_HEADER,
               [[float(a), float(b), int(c), float(m)] for (a, b), c, m in zip(pts, cls, pmax)])
    return str(out / "decision_boundary.csv")


@dataclass
class AuditResult:
    bound: float
    max_curvature: float
    violations: int
    samples: int

    @property
    def slack(self) -> float:
        if self.max_curvature == 0:
            return float("inf")
        return self.bound / self.max_curvature


def bound_audit(model: Sequential, x, seed: int = 0, tol: float = 1e-6) -> AuditResult:
    """Compare the data-free bound with the largest per-logit curvature over ``x``."""
    bound = curvature.theorem1_bound(model)
    worst = np.zeros(len(x))
    for c in range(model.num_classes):
        cf = curvature.normalized_curvature(model, x, c, seed=seed, mode="logit")
        worst = np.maximum(worst, cf)
    return AuditResult(bound, float(worst.max()), int(np.sum(worst > bound * (1 + tol))), len(x))


def cmd_bound_audit(model, dataset: Dataset, samples: int, out_dir, seed=0) -> AuditResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = min(samples, len(dataset))
    res = bound_audit(model, dataset.inputs[:n], seed)
    _write_csv(out / "bound_audit.csv", ["bound", "max_normalized_curvature", "slack", "violations",
                                         "samples"],
               [[res.bound, res.max_curvature, res.slack, res.violations, res.samples]])
    return res


def load_model(path) -> tuple[Sequential, dict]:
    return load_checkpoint(path)
