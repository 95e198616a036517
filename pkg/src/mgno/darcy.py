"""Darcy-flow problem generation and the finite-difference reference solver.

The continuous problem is -div(a(x) grad u) = f with u = 0 on the boundary
and f fixed to 1.  Discretization is the standard 5-point flux form on the
interior-node grid (mesh h = 1/(d+1)) with arithmetic half-point coefficient
averages and zero Dirichlet ghost values; the resulting operator is symmetric
positive definite and an M-matrix, so generated solutions obey a discrete
maximum principle (checked per sample).  The reference solver is conjugate
gradients with Jacobi (diagonal) preconditioning, matrix-free.

Coefficient samplers:

* ``multiscale_trig``: product of six oscillatory factors on [-1, 1]^2 with
  per-scale random frequencies; every factor pair lies in [1/2, 3/2] x
  [1/2, 3/2], so the field is strictly positive.
* ``two_phase_approx``: blur-then-threshold white noise taking exactly the
  two values {a_min, a_max}; the blur radius sets the interface roughness.
  This approximates the two-phase random-field construction and datasets are
  marked "approx" in their metadata.
* ``constant``: a(x) = value, mostly for oracles.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import mgt
from .tensor import Field

__all__ = [
    "CoefficientSpec", "DarcyProblem", "Dataset",
    "gen_multiscale_trig", "gen_two_phase_approx", "gen_constant",
    "assemble_apply", "solve_reference", "build_dataset",
    "save_dataset", "load_dataset", "sample_checks",
]

KINDS = ("multiscale_trig", "two_phase_approx", "constant")


@dataclass(frozen=True)
class CoefficientSpec:
    kind: str
    d: int
    seed: int = 0
    a_min: float = 1.0
    a_max: float = 10.0
    radius: int = 4
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}; "
                             f"expected one of {KINDS}")
        if self.d < 8 and self.kind == "multiscale_trig":
            raise ValueError("multiscale_trig needs d >= 8")
        if self.d < 1:
            raise ValueError("grid size must be positive")
        if self.kind == "two_phase_approx":
            if self.a_min <= 0 or self.a_max <= self.a_min:
                raise ValueError("need 0 < a_min < a_max")
            if self.radius < 1:
                raise ValueError("blur radius must be >= 1")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("constant coefficient must be positive")

    @property
    def h(self) -> float:
        return 1.0 / (self.d + 1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.d, "seed": self.seed,
                "a_min": self.a_min, "a_max": self.a_max,
                "radius": self.radius, "value": self.value}

    @classmethod
    def from_dict(cls, doc: dict) -> "CoefficientSpec":
        allowed = {"kind", "d", "seed", "a_min", "a_max", "radius", "value"}
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown coefficient spec keys: {sorted(unknown)}")
        if "kind" not in doc or "d" not in doc:
            raise ValueError("coefficient spec requires 'kind' and 'd'")
        return cls(**doc)


@dataclass
class DarcyProblem:
    a: Field
    f: Field
    u: Field
    h: float
    residual_norm: float


@dataclass
class Dataset:
    inputs: np.ndarray   # (N, 1, d, d) coefficients
    outputs: np.ndarray  # (N, 1, d, d) solutions
    h: float
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[-1]


# ---------------------------------------------------------------------------
# coefficient samplers
# ---------------------------------------------------------------------------

def _sample_seed(master: int, idx: int) -> int:
    return int(np.random.SeedSequence((master, idx)).generate_state(1)[0])


def _multiscale_trig_array(d: int, seed: int,
                           freqs: np.ndarray | None = None) -> np.ndarray:
    if freqs is None:
        rng = np.random.default_rng(seed)
        lo = 2.0 ** np.arange(6)
        freqs = rng.uniform(lo, 1.5 * lo)
    # interior nodes of [-1, 1]^2; rows are x2, columns x1
    coords = -1.0 + 2.0 * (np.arange(d) + 1) / (d + 1)
    x1 = coords[None, :]
    x2 = coords[:, None]
    a = np.ones((d, d))
    for k in range(6):
        a *= 1.0 + 0.5 * np.cos(freqs[k] * np.pi * (x1 + x2))
        a *= 1.0 + 0.5 * np.sin(freqs[k] * np.pi * (x2 - 3.0 * x1))
    return a


def gen_multiscale_trig(d: int, seed: int) -> Field:
    """Multiscale trigonometric coefficient on the interior grid of [-1,1]^2."""
    if d < 8:
        raise ValueError("multiscale_trig needs d >= 8")
    return Field(_multiscale_trig_array(d, seed)[None])


def _box_blur(noise: np.ndarray, radius: int) -> np.ndarray:
    """Separable moving average with edge clamping."""
    d = noise.shape[0]
    pad = np.pad(noise, radius, mode="edge")
    csum = np.cumsum(pad, axis=0)
    csum = np.vstack([np.zeros((1, pad.shape[1])), csum])
    rows = (csum[2 * radius + 1:, :] - csum[:d, :]) / (2 * radius + 1)
    csum = np.cumsum(rows, axis=1)
    csum = np.hstack([np.zeros((rows.shape[0], 1)), csum])
    return (csum[:, 2 * radius + 1:] - csum[:, :d]) / (2 * radius + 1)


def gen_two_phase_approx(d: int, seed: int, a_min: float, a_max: float,
                         radius: int) -> Field:
    """Two-valued coefficient from thresholded box-blurred white noise."""
    if a_min <= 0 or a_max <= a_min:
        raise ValueError("need 0 < a_min < a_max")
    if radius < 1:
        raise ValueError("blur radius must be >= 1")
    rng = np.random.default_rng(seed)
    smooth = _box_blur(rng.standard_normal((d, d)), radius)
    a = np.where(smooth >= 0.0, a_max, a_min)
    return Field(a[None])


def gen_constant(d: int, value: float) -> Field:
    if value <= 0:
        raise ValueError("constant coefficient must be positive")
    return Field(np.full((1, d, d), float(value)))


def _gen_coefficient(spec: CoefficientSpec, seed: int) -> np.ndarray:
    if spec.kind == "multiscale_trig":
        return _multiscale_trig_array(spec.d, seed)
    if spec.kind == "two_phase_approx":
        return gen_two_phase_approx(spec.d, seed, spec.a_min, spec.a_max,
                                    spec.radius).data[0]
    return np.full((spec.d, spec.d), float(spec.value))


# ---------------------------------------------------------------------------
# discrete operator and reference solver
# ---------------------------------------------------------------------------

def _half_coeffs(a: np.ndarray):
    """Arithmetic-average edge coefficients; boundary edges replicate a."""
    ap = np.pad(a, 1, mode="edge")
    core = ap[1:-1, 1:-1]
    a_e = 0.5 * (core + ap[1:-1, 2:])
    a_w = 0.5 * (core + ap[1:-1, :-2])
    a_s = 0.5 * (core + ap[2:, 1:-1])
    a_n = 0.5 * (core + ap[:-2, 1:-1])
    return a_e, a_w, a_s, a_n


def _apply_operator(a: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    a_e, a_w, a_s, a_n = _half_coeffs(a)
    up = np.pad(u, 1)  # zero Dirichlet ghosts
    core = up[1:-1, 1:-1]
    flux = (a_e * (core - up[1:-1, 2:]) + a_w * (core - up[1:-1, :-2])
            + a_s * (core - up[2:, 1:-1]) + a_n * (core - up[:-2, 1:-1]))
    return flux / (h * h)


def assemble_apply(a: Field, u: Field, h: float) -> Field:
    """Matrix-free application of the variable-coefficient 5-point operator."""
    if a.data.shape != u.data.shape:
        raise ValueError(f"coefficient and field shapes differ: "
                         f"{a.data.shape} vs {u.data.shape}")
    if h <= 0:
        raise ValueError("mesh size h must be positive")
    if np.min(a.data) <= 0:
        raise ValueError("coefficient must be strictly positive")
    return Field(_apply_operator(a.data[0], u.data[0], h)[None])


def _pcg(a: np.ndarray, f: np.ndarray, h: float, tol: float, max_iters: int):
    """Jacobi-preconditioned conjugate gradients, zero initial guess."""
    a_e, a_w, a_s, a_n = _half_coeffs(a)
    diag = (a_e + a_w + a_s + a_n) / (h * h)
    fnorm = np.linalg.norm(f)
    if fnorm == 0.0:
        return np.zeros_like(f), 0.0, 0
    u = np.zeros_like(f)
    r = f.copy()
    z = r / diag
    p = z.copy()
    rz = float(np.sum(r * z))
    rel = 1.0
    for it in range(1, max_iters + 1):
        ap = _apply_operator(a, p, h)
        alpha = rz / float(np.sum(p * ap))
        u += alpha * p
        r -= alpha * ap
        rel = float(np.linalg.norm(r) / fnorm)
        if rel <= tol:
            return u, rel, it
        z = r / diag
        rz_new = float(np.sum(r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise RuntimeError(f"PCG did not reach tol {tol:g} in {max_iters} iterations "
                       f"(relative residual {rel:.3e})")


def solve_reference(a: Field, f: Field, h: float, tol: float = 1e-10) -> DarcyProblem:
    """Solve the discrete system to a relative residual <= tol."""
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    if np.min(a.data) <= 0:
        raise ValueError("coefficient must be strictly positive")
    d = a.data.shape[-1]
    u, rel, _ = _pcg(a.data[0], f.data[0], h, tol, max_iters=50 * d)
    return DarcyProblem(a=a, f=f, u=Field(u[None]), h=h, residual_norm=rel)


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def sample_checks(a: np.ndarray, u: np.ndarray, rel_residual: float,
                  spec: CoefficientSpec, tol: float) -> None:
    """Residual, positivity, and discrete-maximum-principle assertions."""
    if rel_residual > tol:
        raise RuntimeError(f"residual {rel_residual:.3e} above tol {tol:g}")
    if spec.kind == "multiscale_trig":
        lo, hi = 0.5 ** 12, 1.5 ** 12
    elif spec.kind == "two_phase_approx":
        lo, hi = spec.a_min, spec.a_max
    else:
        lo = hi = spec.value
    if np.min(a) < lo - 1e-12 or np.max(a) > hi + 1e-12:
        raise RuntimeError("coefficient outside its positivity bounds")
    if np.min(u) < 0.0:
        raise RuntimeError("solution violates the discrete maximum principle (u < 0)")
    iy, ix = np.unravel_index(np.argmax(u), u.shape)
    d = u.shape[0]
    if iy in (0, d - 1) or ix in (0, d - 1):
        raise RuntimeError("solution maximum sits on the grid ring")


def build_dataset(n_samples: int, spec: CoefficientSpec, tol: float = 1e-10,
                  seed: int | None = None, verbose: bool = False) -> Dataset:
    """Generate (a, u) pairs with f = 1; aborts naming the failing sample."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    master = spec.seed if seed is None else seed
    d = spec.d
    h = spec.h
    f = np.ones((d, d))
    inputs = np.empty((n_samples, 1, d, d))
    outputs = np.empty((n_samples, 1, d, d))
    seeds = [_sample_seed(master, i) for i in range(n_samples)]
    for i in range(n_samples):
        a = _gen_coefficient(spec, seeds[i])
        try:
            u, rel, iters = _pcg(a, f, h, tol, max_iters=50 * d)
            sample_checks(a, u, rel, spec, tol)
        except RuntimeError as exc:
            raise RuntimeError(f"sample {i}: {exc}") from exc
        inputs[i, 0] = a
        outputs[i, 0] = u
        if verbose:
            print(f"sample {i}: residual {rel:.3e} ({iters} iterations)")
    meta = {
        "format": "mgno-darcy-1",
        "spec": spec.to_dict(),
        "approx": spec.kind == "two_phase_approx",
        "h": h,
        "tol": tol,
        "seed": master,
        "n_samples": n_samples,
        "sample_seeds": seeds,
    }
    return Dataset(inputs=inputs, outputs=outputs, h=h, meta=meta)


def save_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    os.makedirs(path, exist_ok=True)
    mgt.write_mgt(os.path.join(path, "inputs.mgt"), ds.inputs)
    mgt.write_mgt(os.path.join(path, "outputs.mgt"), ds.outputs)
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path: str | os.PathLike) -> Dataset:
    with open(os.path.join(path, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format") != "mgno-darcy-1":
        raise ValueError(f"unsupported dataset format {meta.get('format')!r}")
    inputs = mgt.read_mgt(os.path.join(path, "inputs.mgt"))
    outputs = mgt.read_mgt(os.path.join(path, "outputs.mgt"))
    if inputs.shape != outputs.shape or inputs.ndim != 4:
        raise ValueError("dataset tensors must both be (N, 1, d, d)")
    return Dataset(inputs=inputs, outputs=outputs, h=float(meta["h"]), meta=meta)
