"""Losses, Adam with cosine-annealed learning rate, and the training loop.

The training objective is the batch mean of the squared relative L2 (or H1)
error; validation metrics are the unsquared relative errors averaged over
samples.  All reductions run in a fixed order so that two runs with the same
seeds produce identical histories (wall-clock columns aside).

Setting MGNO_THREADS > 1 splits each batch across single-threaded worker
processes (forward and backward over distinct samples are independent);
chunk losses and gradients are summed serially in chunk order, so runs stay
deterministic for a fixed worker count.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import CompGraph, EvalGraph, _dx, _dy
from .network import (MgNOConfig, MgNOParams, forward_batch,
                      forward_batch_superres, init_params)
from .tensor import Field

__all__ = [
    "LOSS_KINDS", "TrainConfig", "TrainHistory", "AdamState",
    "rel_l2", "rel_h1", "cosine_lr", "adam_step", "train", "evaluate",
    "evaluate_superres", "standardize", "grad_check",
]


def standardize(inputs: np.ndarray) -> tuple[np.ndarray, dict]:
    """Standardize a stacked input set by its own statistics.

    Strictly positive inputs (permeability-like coefficients) are z-scored in
    log space, which linearizes their multiplicative structure; anything else
    is z-scored directly.  Targets are never scaled.  A zero-spread set
    (constant coefficients) passes through unshifted.  Returns the scaled
    stack and the transform description.
    """
    if np.min(inputs) > 0.0:
        work = np.log(inputs)
        kind = "log-zscore"
    else:
        work = inputs
        kind = "zscore"
    mean = float(work.mean())
    std = float(work.std())
    if std < 1e-12:
        return (work - mean), {"kind": kind, "mean": mean, "std": 1.0}
    return (work - mean) / std, {"kind": kind, "mean": mean, "std": std}


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _as_chw(x) -> np.ndarray:
    return x.data if isinstance(x, Field) else np.asarray(x, dtype=np.float64)


def rel_l2(pred, target) -> float:
    """Relative L2 error over all grid values."""
    p, t = _as_chw(pred), _as_chw(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    tn = np.linalg.norm(t)
    if tn == 0.0:
        raise ZeroDivisionError("relative L2 undefined for a zero target")
    return float(np.linalg.norm(p - t) / tn)


def rel_h1(pred, target, h: float) -> float:
    """Relative H1 error: L2 plus forward-difference derivative terms."""
    p, t = _as_chw(pred), _as_chw(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    if h <= 0:
        raise ValueError("mesh size h must be positive")
    e = p - t
    num = np.sum(e * e) + np.sum(_dx(e, h) ** 2) + np.sum(_dy(e, h) ** 2)
    den = np.sum(t * t) + np.sum(_dx(t, h) ** 2) + np.sum(_dy(t, h) ** 2)
    if den == 0.0:
        raise ZeroDivisionError("relative H1 undefined for a zero target")
    return float(math.sqrt(num / den))


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max (step 0) to lr_min (step total_steps)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# configuration and bookkeeping
# ---------------------------------------------------------------------------

LOSS_KINDS = ("l2", "h1")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 8
    lr_max: float = 5e-4
    lr_min: float = 2.5e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "h1"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_l2: list[float] = field(default_factory=list)
    val_h1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch, train_loss, val_l2, val_h1, lr, seconds):
        self.epoch.append(int(epoch))
        self.train_loss.append(float(train_loss))
        self.val_l2.append(float(val_l2))
        self.val_h1.append(float(val_h1))
        self.lr.append(float(lr))
        self.seconds.append(float(seconds))

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_l2,val_h1,lr,seconds"]
        for i in range(len(self.epoch)):
            lines.append(f"{self.epoch[i]},{self.train_loss[i]:.12e},"
                         f"{self.val_l2[i]:.12e},{self.val_h1[i]:.12e},"
                         f"{self.lr[i]:.12e},{self.seconds[i]:.3f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_l2": self.val_l2, "val_h1": self.val_h1, "lr": self.lr,
                "seconds": self.seconds}

    def deterministic_columns(self) -> dict:
        d = self.to_dict()
        d.pop("seconds")
        return d


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, arrays: dict):
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0


def adam_step(arrays: dict, grads: dict, state: AdamState, lr: float,
              frozen: set = frozenset(), beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction; frozen names untouched."""
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, p in arrays.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
        if not np.isfinite(p).all():
            raise FloatingPointError(f"non-finite parameter after update: {name!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _param_arrays(params: MgNOParams) -> dict:
    return {name: np.array(arr, dtype=np.float64) for name, arr in params.named_arrays()}


def _rebuild(template: MgNOParams, arrays: dict) -> MgNOParams:
    return template.map_arrays(lambda name, _arr: arrays[name])


def evaluate(params: MgNOParams, cfg: MgNOConfig, inputs: np.ndarray,
             outputs: np.ndarray, h: float, batch_size: int = 8) -> dict:
    """Per-sample relative L2/H1 errors of the network on a stacked dataset.

    ``inputs``/``outputs`` use the on-disk layout (N, c, d, d).  Batches stay
    small so the convolution working set remains cache-resident.
    """
    l2s, h1s = [], []
    for start in range(0, inputs.shape[0], batch_size):
        xb = np.ascontiguousarray(
            inputs[start:start + batch_size].transpose(1, 0, 2, 3))
        yb = outputs[start:start + batch_size]
        pred = forward_batch(EvalGraph(), xb, params, cfg)
        for i in range(yb.shape[0]):
            l2s.append(rel_l2(pred[:, i], yb[i]))
            h1s.append(rel_h1(pred[:, i], yb[i], h))
    return {
        "l2": l2s, "h1": h1s,
        "mean_l2": float(np.mean(l2s)), "median_l2": float(np.median(l2s)),
        "mean_h1": float(np.mean(h1s)), "median_h1": float(np.median(h1s)),
    }


def evaluate_superres(params: MgNOParams, cfg: MgNOConfig, inputs: np.ndarray,
                      outputs: np.ndarray, h: float, extra_levels: int,
                      batch_size: int = 8) -> dict:
    """Relative errors at a grid 2^extra_levels finer than the training grid."""
    l2s, h1s = [], []
    for start in range(0, inputs.shape[0], batch_size):
        xb = np.ascontiguousarray(
            inputs[start:start + batch_size].transpose(1, 0, 2, 3))
        yb = outputs[start:start + batch_size]
        pred = forward_batch_superres(xb, params, cfg, extra_levels)
        for i in range(yb.shape[0]):
            l2s.append(rel_l2(pred[:, i], yb[i]))
            h1s.append(rel_h1(pred[:, i], yb[i], h))
    return {
        "l2": l2s, "h1": h1s,
        "mean_l2": float(np.mean(l2s)), "median_l2": float(np.median(l2s)),
        "mean_h1": float(np.mean(h1s)), "median_h1": float(np.median(h1s)),
    }


def worker_count() -> int:
    """Worker processes for batch-parallel training, capped by MGNO_THREADS."""
    raw = os.environ.get("MGNO_THREADS", "").strip()
    if not raw:
        return 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ValueError(f"MGNO_THREADS must be an integer, got {raw!r}") from exc
    return max(1, min(cap, os.cpu_count() or 1))


def _chunk_loss_grads(template: MgNOParams, arrays: dict, cfg: MgNOConfig,
                      loss_kind: str, h: float, xb: np.ndarray, yb: np.ndarray,
                      weight: float):
    """Forward/backward over one batch chunk; loss scaled by its batch share."""
    g = CompGraph()
    nodes = {name: g.leaf(arr) for name, arr in arrays.items()}
    pstruct = template.map_arrays(lambda name, _arr: nodes[name])
    pred = forward_batch(g, g.leaf(xb, requires_grad=False), pstruct, cfg)
    loss = g.scale(g.mean_sq_rel(pred, yb, loss_kind, h), weight)
    loss_val = float(loss.value)
    if not math.isfinite(loss_val):
        raise FloatingPointError("non-finite training loss")
    g.backward(loss)
    return loss_val, {name: nodes[name].grad for name in arrays}


_WORKER: dict = {}


def _proc_init(cfg_doc: dict, loss_kind: str, h: float) -> None:
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass
    _WORKER["cfg"] = MgNOConfig.from_dict(cfg_doc)
    _WORKER["template"] = init_params(_WORKER["cfg"])
    _WORKER["loss"] = loss_kind
    _WORKER["h"] = h


def _proc_chunk(arrays: dict, xb: np.ndarray, yb: np.ndarray, weight: float):
    return _chunk_loss_grads(_WORKER["template"], arrays, _WORKER["cfg"],
                             _WORKER["loss"], _WORKER["h"], xb, yb, weight)


def _make_pool(workers: int, cfg: MgNOConfig, loss_kind: str, h: float):
    """Forked workers with single-threaded BLAS for batch-parallel steps."""
    return ProcessPoolExecutor(
        max_workers=workers, mp_context=mp.get_context("fork"),
        initializer=_proc_init, initargs=(cfg.to_dict(), loss_kind, h))


def train(inputs: np.ndarray, outputs: np.ndarray, h: float, cfg: MgNOConfig,
          tcfg: TrainConfig, val_inputs: np.ndarray | None = None,
          val_outputs: np.ndarray | None = None,
          epoch_callback=None) -> tuple[MgNOParams, TrainHistory]:
    """Minimize the mean squared relative loss over (inputs, outputs).

    ``inputs``/``outputs`` are (N, c, d, d) stacks.  Validation defaults to
    the training set.  ``epoch_callback(epoch, params)`` runs after each
    epoch's bookkeeping (used for periodic checkpoints).
    """
    n = inputs.shape[0]
    if n < 1:
        raise ValueError("dataset is empty")
    if val_inputs is None:
        val_inputs, val_outputs = inputs, outputs
    # channel-first copies for the compute layout
    x_all = np.ascontiguousarray(inputs.transpose(1, 0, 2, 3))
    y_all = np.ascontiguousarray(outputs.transpose(1, 0, 2, 3))

    template = init_params(cfg)
    arrays = _param_arrays(template)
    state = AdamState(arrays)
    rng = np.random.default_rng(tcfg.seed)
    steps_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    total_steps = tcfg.epochs * steps_per_epoch
    history = TrainHistory()
    workers = worker_count()
    pool = _make_pool(workers, cfg, tcfg.loss, h) if workers > 1 else None

    try:
        step = 0
        for epoch in range(1, tcfg.epochs + 1):
            t0 = time.time()
            order = rng.permutation(n)
            epoch_loss = 0.0
            lr = tcfg.lr_max
            for bstart in range(0, n, tcfg.batch_size):
                idx = order[bstart:bstart + tcfg.batch_size]
                xb = x_all[:, idx]
                yb = y_all[:, idx]
                try:
                    if pool is not None and len(idx) >= 2 * workers:
                        bounds = np.linspace(0, len(idx), workers + 1, dtype=int)
                        futures = [
                            pool.submit(_proc_chunk, arrays, xb[:, lo:hi],
                                        yb[:, lo:hi], (hi - lo) / len(idx))
                            for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
                        parts = [f.result() for f in futures]  # fixed chunk order
                        loss_val = sum(p[0] for p in parts)
                        grads = {}
                        for _, gpart in parts:
                            for name, val in gpart.items():
                                if val is None:
                                    continue
                                if name in grads:
                                    grads[name] = grads[name] + val
                                else:
                                    grads[name] = val
                    else:
                        loss_val, grads = _chunk_loss_grads(
                            template, arrays, cfg, tcfg.loss, h, xb, yb, 1.0)
                except FloatingPointError as exc:
                    raise FloatingPointError(
                        f"{exc} (epoch {epoch}, batch {bstart // tcfg.batch_size})"
                    ) from exc
                lr = cosine_lr(step, total_steps, tcfg.lr_max, tcfg.lr_min)
                adam_step(arrays, grads, state, lr, frozen=template.frozen,
                          beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
                epoch_loss += loss_val * len(idx)
                step += 1
            params = _rebuild(template, arrays)
            metrics = evaluate(params, cfg, val_inputs, val_outputs, h)
            history.append(epoch, epoch_loss / n, metrics["mean_l2"],
                           metrics["mean_h1"], lr, time.time() - t0)
            if epoch_callback is not None:
                epoch_callback(epoch, params)
    finally:
        if pool is not None:
            pool.shutdown(wait=True, cancel_futures=True)
    return _rebuild(template, arrays), history


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

def grad_check(cfg: MgNOConfig, d: int, seed: int = 0, step: float = 1e-5,
               loss_kind: str = "l2", h: float = 1.0) -> dict:
    """Compare analytic gradients against central finite differences.

    Every scalar parameter is perturbed by +/- step.  The relative deviation
    uses a small absolute floor so that parameters whose true gradient is far
    below the finite-difference noise floor (~1e-10 here) do not dominate.
    Returns per-tensor and overall maxima.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((cfg.in_channels, 1, d, d))
    y = rng.standard_normal((cfg.out_channels, 1, d, d))

    template = init_params(cfg)
    arrays = _param_arrays(template)

    def loss_of(arrs: dict) -> float:
        pstruct = template.map_arrays(lambda name, _a: arrs[name])
        pred = forward_batch(EvalGraph(), x, pstruct, cfg)
        return float(EvalGraph.mean_sq_rel(pred, y, loss_kind, h))

    g = CompGraph()
    nodes = {name: g.leaf(arr) for name, arr in arrays.items()}
    pstruct = template.map_arrays(lambda name, _a: nodes[name])
    pred = forward_batch(g, g.leaf(x), pstruct, cfg)
    loss = g.mean_sq_rel(pred, y, loss_kind, h)
    g.backward(loss)

    per_tensor = {}
    worst = 0.0
    floor = 1e-5
    for name, arr in arrays.items():
        ana = nodes[name].grad
        if ana is None:
            ana = np.zeros_like(arr)
        dev = 0.0
        flat = arr.reshape(-1)
        ana_flat = np.asarray(ana).reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            lp = loss_of(arrays)
            flat[i] = keep - step
            lm = loss_of(arrays)
            flat[i] = keep
            fd = (lp - lm) / (2.0 * step)
            denom = max(abs(ana_flat[i]), abs(fd), floor)
            dev = max(dev, abs(ana_flat[i] - fd) / denom)
        per_tensor[name] = dev
        worst = max(worst, dev)
    return {"per_tensor": per_tensor, "max_rel_deviation": worst}
