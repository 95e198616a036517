"""Command-line entry point for reproducible runs.

Subcommands cover the full pipeline: ``solve-poisson`` (classical solver
check), ``gen`` (Darcy dataset generation), ``train`` / ``eval`` (operator
learning), ``superres`` (zero-shot evaluation at a finer grid with extra
V-cycle levels), and ``gradcheck`` (finite-difference gradient audit).

Exit codes: 0 success, 1 an acceptance threshold failed, 2 usage or
validation error.  All JSON outputs are written with sorted keys and no
timestamps, so re-runs with the same flags and seeds are byte-identical.
The MGNO_THREADS environment variable caps worker processes during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import darcy
from .multigrid import classical_poisson_config, classical_poisson_weights, \
    estimate_contraction
from .network import MgNOConfig, load_checkpoint, save_checkpoint
from .tensor import BoundaryMode, Field, conv2d
from .tensor import Kernel
from . import training

RHO_RANGE = (0.05, 0.2)
GRADCHECK_TOL = 1e-5


class CliError(Exception):
    """Validation failure mapped to exit code 2."""


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_keys(doc: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise CliError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(doc)
    if missing:
        raise CliError(f"{where}: missing keys {sorted(missing)}")


_MODEL_DEFAULTS = {
    "layers": 3, "width": 8, "levels": 4,
    "pre_iters": None, "post_iters": None,
    "cycle": "v", "boundary": "dirichlet", "restrict_boundary": "dirichlet",
    "boundary_preserving": True, "in_channels": 1, "out_channels": 1, "seed": 0,
}


def _model_config(doc: dict) -> MgNOConfig:
    _require_keys(doc, set(_MODEL_DEFAULTS), set(), "model config")
    merged = dict(_MODEL_DEFAULTS)
    merged.update(doc)
    levels = merged["levels"]
    if merged["pre_iters"] is None:
        merged["pre_iters"] = [1] * (levels - 1) + [2]
    if merged["post_iters"] is None:
        merged["post_iters"] = [0] * levels
    try:
        return MgNOConfig(
            layers=merged["layers"], width=merged["width"], levels=levels,
            pre_iters=tuple(merged["pre_iters"]),
            post_iters=tuple(merged["post_iters"]), cycle=merged["cycle"],
            boundary=BoundaryMode.parse(merged["boundary"]),
            restrict_boundary=BoundaryMode.parse(merged["restrict_boundary"]),
            boundary_preserving=bool(merged["boundary_preserving"]),
            in_channels=merged["in_channels"],
            out_channels=merged["out_channels"], seed=merged["seed"])
    except ValueError as exc:
        raise CliError(f"model config: {exc}") from exc


def _train_config(doc: dict) -> training.TrainConfig:
    allowed = {"epochs", "batch_size", "lr_max", "lr_min", "beta1", "beta2",
               "eps", "loss", "seed", "ckpt_every"}
    _require_keys(doc, allowed, {"epochs"}, "train config")
    kwargs = {k: v for k, v in doc.items() if k != "ckpt_every"}
    try:
        return training.TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"train config: {exc}") from exc


def _load_run_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read run config {path}: {exc}") from exc
    _require_keys(doc, {"version", "dataset", "model", "train"},
                  {"dataset", "model", "train"}, "run config")
    if doc.get("version", 1) != 1:
        raise CliError(f"unsupported run config version {doc.get('version')}")
    _require_keys(doc["dataset"], {"train", "val"}, {"train"}, "dataset config")
    for key, p in doc["dataset"].items():
        if not os.path.isdir(p):
            raise CliError(f"dataset.{key}: no such directory {p!r}")
    return doc


def _config_hash(ckpt_dir: str) -> str:
    with open(os.path.join(ckpt_dir, "config.json"), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_solve_poisson(args) -> int:
    levels = args.levels
    div = 2 ** (levels - 1)
    if args.size < div or args.size % div:
        raise CliError(f"--size must be divisible by 2^(levels-1) = {div}, "
                       f"got {args.size}")
    if args.iters < 1:
        raise CliError("--iters must be >= 1")
    cfg = classical_poisson_config(levels)
    weights = classical_poisson_weights(levels)
    rng = np.random.default_rng(args.seed)
    u_star = Field(rng.standard_normal((1, args.size, args.size)))
    f = conv2d(u_star, Kernel(weights.a[0]), cfg.boundary)
    report = estimate_contraction(f, u_star, weights, cfg, iters=args.iters)
    doc = {
        "command": "solve-poisson",
        "size": args.size, "levels": levels, "iters": args.iters,
        "seed": args.seed, "rho_range": list(RHO_RANGE),
        "report": report.to_dict(),
    }
    _write_json(args.out, doc)
    ok = RHO_RANGE[0] <= report.rho <= RHO_RANGE[1] and not report.diverged
    print(f"contraction factor rho = {report.rho:.4f} "
          f"({'ok' if ok else 'outside ' + str(RHO_RANGE)})")
    return 0 if ok else 1


def cmd_gen(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read spec {args.spec}: {exc}") from exc
    try:
        spec = darcy.CoefficientSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"coefficient spec: {exc}") from exc
    if args.n < 1:
        raise CliError("--n must be >= 1")
    ds = darcy.build_dataset(args.n, spec, tol=args.tol, verbose=args.verbose)
    darcy.save_dataset(args.out, ds)
    print(f"wrote {args.n} samples (d={spec.d}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    doc = _load_run_config(args.config)
    cfg = _model_config(doc["model"])
    tcfg = _train_config(doc["train"])
    ckpt_every = int(doc["train"].get("ckpt_every", 0))

    train_ds = darcy.load_dataset(doc["dataset"]["train"])
    val_path = doc["dataset"].get("val", doc["dataset"]["train"])
    val_ds = darcy.load_dataset(val_path)
    if train_ds.d % 2 ** (cfg.levels - 1):
        raise CliError(f"dataset grid {train_ds.d} not divisible by "
                       f"2^(levels-1) = {2 ** (cfg.levels - 1)}")
    if train_ds.inputs.shape[1] != cfg.in_channels:
        raise CliError(f"dataset has {train_ds.inputs.shape[1]} input channels, "
                       f"model expects {cfg.in_channels}")

    os.makedirs(args.out, exist_ok=True)
    x_train, norm = training.standardize(train_ds.inputs)
    x_val, _ = training.standardize(val_ds.inputs)
    extra = {"train_size": train_ds.d, "normalize": norm}

    def callback(epoch, params):
        if ckpt_every and epoch % ckpt_every == 0 and epoch < tcfg.epochs:
            save_checkpoint(os.path.join(args.out, f"epoch_{epoch:04d}"),
                            params, cfg, extra=extra)

    params, history = training.train(
        x_train, train_ds.outputs, train_ds.h, cfg, tcfg,
        val_inputs=x_val, val_outputs=val_ds.outputs,
        epoch_callback=callback)

    save_checkpoint(args.out, params, cfg, extra=extra)
    with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(history.to_csv())
    _write_json(os.path.join(args.out, "history.json"), history.to_dict())
    print(f"final epoch: train_loss={history.train_loss[-1]:.4e} "
          f"val_l2={history.val_l2[-1]:.4e} val_h1={history.val_h1[-1]:.4e}")
    return 0


def _eval_to_json(params, cfg, ds, ckpt_dir, out_path, extra: dict,
                  extra_levels: int = 0) -> dict:
    x, _ = training.standardize(ds.inputs)
    if extra_levels:
        metrics = training.evaluate_superres(params, cfg, x, ds.outputs, ds.h,
                                             extra_levels)
    else:
        metrics = training.evaluate(params, cfg, x, ds.outputs, ds.h)
    doc = {
        "config_hash": _config_hash(ckpt_dir),
        "n_samples": ds.n,
        "grid": ds.d,
        "mean_l2": metrics["mean_l2"], "median_l2": metrics["median_l2"],
        "mean_h1": metrics["mean_h1"], "median_h1": metrics["median_h1"],
        "per_sample_l2": metrics["l2"], "per_sample_h1": metrics["h1"],
    }
    doc.update(extra)
    _write_json(out_path, doc)
    return doc


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    ds = darcy.load_dataset(args.data)
    if ds.d % 2 ** (cfg.levels - 1):
        raise CliError(f"data grid {ds.d} incompatible with model levels")
    if ds.inputs.shape[1] != cfg.in_channels:
        raise CliError(f"data has {ds.inputs.shape[1]} channels, "
                       f"model expects {cfg.in_channels}")
    doc = _eval_to_json(params, cfg, ds, args.ckpt, args.out,
                        {"command": "eval"})
    print(f"mean relative L2 = {doc['mean_l2']:.4e}, "
          f"mean relative H1 = {doc['mean_h1']:.4e}")
    return 0


def cmd_superres(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    with open(os.path.join(args.ckpt, "config.json"), encoding="utf-8") as fh:
        train_size = json.load(fh).get("train_size")
    if args.train_size:
        train_size = args.train_size
    if not train_size:
        raise CliError("checkpoint does not record its training grid; "
                       "pass --train-size")
    ds = darcy.load_dataset(args.data_hi)
    k = args.extra_levels
    if k < 0:
        raise CliError("--extra-levels must be >= 0")
    if ds.d != train_size * 2 ** k:
        raise CliError(f"resolution ratio {ds.d}/{train_size} is not 2^"
                       f"{k}; superres needs d_hi = 2^k * d_train")
    doc = _eval_to_json(params, cfg, ds, args.ckpt, args.out,
                        {"command": "superres", "extra_levels": k,
                         "train_size": train_size}, extra_levels=k)
    print(f"superres (x{2 ** k}): mean relative L2 = {doc['mean_l2']:.4e}, "
          f"mean relative H1 = {doc['mean_h1']:.4e}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.size > 16:
        raise CliError("--size capped at 16 (finite differences over every "
                       "parameter)")
    if args.size % 2:
        raise CliError("--size must be even (two-level hierarchy)")
    cfg = MgNOConfig(layers=2, width=4, levels=2, pre_iters=(1, 1),
                     post_iters=(1, 0), boundary_preserving=False,
                     seed=args.seed)
    result = training.grad_check(cfg, d=args.size, seed=args.seed,
                                 loss_kind="h1", h=1.0 / (args.size + 1))
    for name in sorted(result["per_tensor"]):
        print(f"{name:32s} {result['per_tensor'][name]:.3e}")
    worst = result["max_rel_deviation"]
    print(f"max relative deviation: {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if worst < GRADCHECK_TOL else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mgno",
        description="Multigrid neural operator: classical solver, data "
                    "generation, training, evaluation, super-resolution.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-poisson", help="contraction check of the "
                       "classical Poisson multigrid preset")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve_poisson)

    p = sub.add_parser("gen", help="generate a Darcy dataset")
    p.add_argument("--spec", required=True, help="coefficient spec JSON")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("superres", help="zero-shot evaluation at a finer grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-hi", dest="data_hi", required=True)
    p.add_argument("--extra-levels", dest="extra_levels", type=int, default=1)
    p.add_argument("--train-size", dest="train_size", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
