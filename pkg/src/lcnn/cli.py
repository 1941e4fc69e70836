"""Command-line entry point: ``lcnn <command> [flags]``.

Every command writes CSV files into ``--out-dir`` and prints a one-line JSON
summary.  Failures print ``{"error": ..., "message": ...}`` and exit with
status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from lcnn import experiments as ex

COMMANDS = ("train", "geometry", "grad-robustness", "attack", "decision-boundary", "bound-audit")
DEFAULT_RADII = tuple(float(r) for r in np.logspace(-3, -1, 5))


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lcnn", description="Low-curvature network experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--variant", choices=ex.VARIANTS)
    p.add_argument("--dataset", choices=("two-moons", "digits", "blobs", "idx"))
    p.add_argument("--arch", choices=sorted(ex.ARCHITECTURES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-beta", type=float)
    p.add_argument("--lambda-gamma", type=float)
    p.add_argument("--lambda-grad", type=float)
    p.add_argument("--eps-list", type=_floats, help="comma-separated l2 radii for attacks")
    p.add_argument("--pgd-steps", type=int)
    p.add_argument("--radii", type=_floats, help="comma-separated radii for grad-robustness")
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--bounds", type=_floats, default=[-3.0, 3.0, -3.0, 3.0],
                   help="xmin,xmax,ymin,ymax of the decision grid")
    p.add_argument("--samples", type=int, default=500, help="inputs used by bound-audit")
    p.add_argument("--max-points", type=int, help="cap on inputs used by geometry commands")
    p.add_argument("--mode", choices=("loss", "logit"), default="loss")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="JSON file whose keys override flags")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


TRAIN_KEYS = {"epochs": "epochs", "seed": "seed", "lambda_beta": "lambda_beta",
              "lambda_gamma": "lambda_gamma", "lambda_grad": "lambda_grad"}


def resolve(args: argparse.Namespace) -> tuple[ex.ExperimentSpec, dict]:
    """Merge flags with an optional JSON config (config keys win)."""
    conf = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            conf = json.load(fh)
        if not isinstance(conf, dict):
            raise ValueError("config file must hold a JSON object")
    flags = {k: v for k, v in vars(args).items() if v is not None}
    for k, v in conf.items():
        flags[k.replace("-", "_")] = v

    train = dict(conf.get("train", {}))
    for flag, key in TRAIN_KEYS.items():
        if flag in flags and key not in train:
            train[key] = flags[flag]
    attack = dict(conf.get("attack", {}))
    if "eps_list" in flags:
        attack.setdefault("epsilons", flags["eps_list"])
    if "pgd_steps" in flags:
        attack.setdefault("steps", flags["pgd_steps"])
    if "seed" in flags:
        attack.setdefault("seed", flags["seed"])
    spec = ex.ExperimentSpec(
        command=flags["command"],
        arch=flags.get("arch"),
        variant=flags.get("variant", "standard"),
        dataset=flags.get("dataset", "two-moons"),
        out_dir=flags.get("out_dir", "runs"),
        checkpoint=flags.get("checkpoint"),
        train=train,
        attack=attack,
        data=dict(conf.get("data", {})),
        arch_options=dict(conf.get("arch_options", {})),
    )
    return spec, flags


def _eval_data(spec: ex.ExperimentSpec, meta: dict, model_meta: dict, flags: dict):
    dataset = flags.get("dataset") or model_meta.get("dataset") or spec.dataset
    seed = flags.get("seed", meta.get("seed", 0))
    return ex.load_dataset(dataset, seed, **spec.data)


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    spec, flags = resolve(args)
    if spec.command == "train":
        return ex.cmd_train(spec)

    if not spec.checkpoint:
        raise ValueError(f"{spec.command} needs --checkpoint")
    model, meta = ex.load_model(spec.checkpoint)
    if spec.command == "decision-boundary":
        bounds = tuple(flags.get("bounds", (-3.0, 3.0, -3.0, 3.0)))
        if len(bounds) != 4:
            raise ValueError("--bounds needs four numbers")
        path = ex.cmd_decision_boundary(model, spec.out_dir, flags.get("resolution", 200), bounds)
        return {"grid": path}

    train_set, test_set = _eval_data(spec, meta, model.meta, flags)
    if spec.command == "geometry":
        return ex.cmd_geometry(model, train_set, test_set, spec.out_dir, flags.get("seed", 0),
                               flags.get("mode", "loss"), flags.get("max_points"))
    if spec.command == "grad-robustness":
        rows = ex.cmd_grad_robustness(model, test_set, flags.get("radii", DEFAULT_RADII),
                                      spec.out_dir, flags.get("seed", 0), flags.get("max_points"))
        return {"rows": rows}
    if spec.command == "attack":
        table = ex.cmd_attack(model, test_set, spec.attack_config(), spec.out_dir)
        return {"accuracy": {str(k): v for k, v in table.items()}}
    if spec.command == "bound-audit":
        res = ex.cmd_bound_audit(model, test_set, flags.get("samples", 500), spec.out_dir,
                                 flags.get("seed", 0))
        summary = {"bound": res.bound, "max_normalized_curvature": res.max_curvature,
                   "slack": res.slack, "violations": res.violations}
        if res.violations:
            raise BoundViolation(summary)
        return summary
    raise ValueError(f"unknown command {spec.command!r}")


class BoundViolation(RuntimeError):
    pass


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit:
        raise
    except Exception as exc:  # report every failure as one JSON line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}))
        return 1
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
