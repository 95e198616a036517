"""The full operator network: stacked V-cycle layers with channel mixing.

Layer ``l`` computes ``gelu(Wmg_l(h) + B_l h + b_l 1)`` and the output layer
applies a final V-cycle with no activation and no bias.  Hidden width is one
constant ``n``; the first layer's lifting kernel K0 maps the raw input
channels into ``n``, so no separate lifting layer exists, and the output
V-cycle runs on ``out_channels`` internal channels with its K0 mapping
``n -> out_channels``.

Boundary-preserving mode (Dirichlet): the discrete bias basis is the interior
indicator (zero ring), the first layer's channel-mix matrix is frozen at zero,
and every V-cycle output is projected onto the zero-ring subspace.  Outputs
then satisfy the homogeneous boundary condition exactly for any parameter
values, trained or not.  For periodic problems the circular padding plays the
same role and no projection is needed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import multigrid as mg
from . import mgt
from .autodiff import EvalGraph
from .multigrid import MgConfig, MgWeights
from .tensor import BoundaryMode, Field, conv_transpose2d_cnhw

__all__ = [
    "MgNOConfig", "MgNOParams", "init_params", "forward", "forward_batch",
    "param_count", "save_checkpoint", "load_checkpoint",
    "forward_superres", "forward_batch_superres",
]

CHECKPOINT_FORMAT = "mgno-ckpt-1"


@dataclass(frozen=True)
class MgNOConfig:
    """Architecture hyperparameters shared by all layers."""

    layers: int
    width: int
    levels: int
    pre_iters: tuple[int, ...]
    post_iters: tuple[int, ...]
    cycle: str = mg.CYCLE_V
    boundary: BoundaryMode = BoundaryMode.DIRICHLET_ZERO
    restrict_boundary: BoundaryMode = BoundaryMode.DIRICHLET_ZERO
    boundary_preserving: bool = False
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pre_iters", tuple(int(v) for v in self.pre_iters))
        object.__setattr__(self, "post_iters", tuple(int(v) for v in self.post_iters))
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        # validate the per-layer multigrid configs eagerly
        self.layer_mg_config(0)
        self.output_mg_config()

    def layer_mg_config(self, layer: int) -> MgConfig:
        c_in = self.in_channels if layer == 0 else self.width
        return MgConfig(levels=self.levels, channels=(self.width,) * self.levels,
                        pre_iters=self.pre_iters, post_iters=self.post_iters,
                        cycle=self.cycle, boundary=self.boundary,
                        restrict_boundary=self.restrict_boundary,
                        input_channels=c_in)

    def output_mg_config(self) -> MgConfig:
        return MgConfig(levels=self.levels, channels=(self.out_channels,) * self.levels,
                        pre_iters=self.pre_iters, post_iters=self.post_iters,
                        cycle=self.cycle, boundary=self.boundary,
                        restrict_boundary=self.restrict_boundary,
                        input_channels=self.width)

    def to_dict(self) -> dict:
        return {
            "layers": self.layers, "width": self.width, "levels": self.levels,
            "pre_iters": list(self.pre_iters), "post_iters": list(self.post_iters),
            "cycle": self.cycle, "boundary": self.boundary.value,
            "restrict_boundary": self.restrict_boundary.value,
            "boundary_preserving": self.boundary_preserving,
            "in_channels": self.in_channels, "out_channels": self.out_channels,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MgNOConfig":
        return cls(layers=d["layers"], width=d["width"], levels=d["levels"],
                   pre_iters=tuple(d["pre_iters"]), post_iters=tuple(d["post_iters"]),
                   cycle=d["cycle"], boundary=BoundaryMode.parse(d["boundary"]),
                   restrict_boundary=BoundaryMode.parse(d["restrict_boundary"]),
                   boundary_preserving=d["boundary_preserving"],
                   in_channels=d["in_channels"], out_channels=d["out_channels"],
                   seed=d["seed"])


@dataclass
class LayerParams:
    wmg: MgWeights
    bmat: object  # (width, prev_channels); frozen zero in layer 1 when boundary-preserving
    bvec: object


@dataclass
class MgNOParams:
    """All trainable tensors plus the set of frozen parameter names."""

    layers: list[LayerParams]
    out_wmg: MgWeights
    frozen: set[str] = field(default_factory=set)

    def named_arrays(self):
        for i, lp in enumerate(self.layers):
            for name, arr in lp.wmg.tensors():
                yield f"layer{i + 1}.wmg.{name}", arr
            yield f"layer{i + 1}.bmat", lp.bmat
            yield f"layer{i + 1}.bvec", lp.bvec
        for name, arr in self.out_wmg.tensors():
            yield f"output.wmg.{name}", arr

    def map_arrays(self, fn) -> "MgNOParams":
        """Apply fn(name, array) -> value leaf-wise, preserving structure."""
        def map_wmg(prefix, w):
            return MgWeights(
                k0=fn(f"{prefix}.k0", w.k0),
                a=[fn(f"{prefix}.a{l + 1}", arr) for l, arr in enumerate(w.a)],
                b_pre=[[fn(f"{prefix}.b{l + 1}_{i + 1}", arr)
                        for i, arr in enumerate(arrs)] for l, arrs in enumerate(w.b_pre)],
                b_post=[[fn(f"{prefix}.bp{l + 1}_{i + 1}", arr)
                         for i, arr in enumerate(arrs)] for l, arrs in enumerate(w.b_post)],
                r=[fn(f"{prefix}.r{l + 1}", arr) for l, arr in enumerate(w.r)],
                p=[fn(f"{prefix}.p{l + 1}", arr) for l, arr in enumerate(w.p)],
            )
        layers = [LayerParams(wmg=map_wmg(f"layer{i + 1}.wmg", lp.wmg),
                              bmat=fn(f"layer{i + 1}.bmat", lp.bmat),
                              bvec=fn(f"layer{i + 1}.bvec", lp.bvec))
                  for i, lp in enumerate(self.layers)]
        return MgNOParams(layers=layers, out_wmg=map_wmg("output.wmg", self.out_wmg),
                          frozen=set(self.frozen))


def _init_wmg(rng: np.random.Generator, cfg: MgConfig) -> MgWeights:
    def draw(out_c, in_c, kh, kw):
        s = 1.0 / np.sqrt(in_c * kh * kw)
        return rng.uniform(-s, s, size=(out_c, in_c, kh, kw))
    ch = cfg.channels
    return MgWeights(
        k0=draw(ch[0], cfg.input_channels, 3, 3),
        a=[draw(ch[l], ch[l], 3, 3) for l in range(cfg.levels)],
        b_pre=[[draw(ch[l], ch[l], 3, 3) for _ in range(cfg.pre_iters[l])]
               for l in range(cfg.levels)],
        b_post=[[draw(ch[l], ch[l], 3, 3) for _ in range(cfg.post_iters[l])]
                for l in range(cfg.levels)],
        r=[draw(ch[l + 1], ch[l], 3, 3) for l in range(cfg.levels - 1)],
        p=[draw(ch[l], ch[l + 1], 4, 4) for l in range(cfg.levels - 1)],
    )


def init_params(cfg: MgNOConfig) -> MgNOParams:
    """Seeded init: kernels uniform in [-s, s] with s = 1/sqrt(fan_in);
    channel-mix matrices and biases start at zero."""
    rng = np.random.default_rng(cfg.seed)
    layers = []
    for i in range(cfg.layers):
        lcfg = cfg.layer_mg_config(i)
        prev = cfg.in_channels if i == 0 else cfg.width
        layers.append(LayerParams(
            wmg=_init_wmg(rng, lcfg),
            bmat=np.zeros((cfg.width, prev)),
            bvec=np.zeros(cfg.width),
        ))
    out_wmg = _init_wmg(rng, cfg.output_mg_config())
    frozen = {"layer1.bmat"} if cfg.boundary_preserving else set()
    return MgNOParams(layers=layers, out_wmg=out_wmg, frozen=frozen)


def _interior_mask(d_y: int, d_x: int) -> np.ndarray:
    m = np.zeros((d_y, d_x))
    m[1:-1, 1:-1] = 1.0
    return m


def forward_batch(g, x, params: MgNOParams, cfg: MgNOConfig,
                  activation: str = "gelu"):
    """Network forward over a (c_in, N, d, d) batch via the op provider ``g``.

    ``activation="identity"`` is a test hook for linearity checks.
    """
    shape = x.value.shape if hasattr(x, "value") else x.shape
    project = cfg.boundary_preserving and cfg.boundary is BoundaryMode.DIRICHLET_ZERO
    mask = _interior_mask(shape[2], shape[3]) if project else None
    bias_field = mask if project else None

    h = x
    for i, lp in enumerate(params.layers):
        lcfg = cfg.layer_mg_config(i)
        wmg_out = mg.vcycle(g, h, None, lp.wmg, lcfg)
        if project:
            wmg_out = g.mask(wmg_out, mask)
        z = g.add(wmg_out, g.channel_mix(h, lp.bmat, lp.bvec, bias_field))
        h = g.gelu(z) if activation == "gelu" else z
    out = mg.vcycle(g, h, None, params.out_wmg, cfg.output_mg_config())
    if project:
        out = g.mask(out, mask)
    return out


def forward(u: Field, params: MgNOParams, cfg: MgNOConfig,
            activation: str = "gelu") -> Field:
    """Evaluate the network on a single field."""
    if u.channels != cfg.in_channels:
        raise ValueError(f"input has {u.channels} channels, "
                         f"config expects {cfg.in_channels}")
    cfg.layer_mg_config(0).check_size(u.d_y, u.d_x)
    out = forward_batch(EvalGraph(), u.data[:, None], params, cfg, activation)
    if not np.isfinite(out).all():
        raise FloatingPointError("forward produced non-finite values")
    return Field(out[:, 0])


def param_count(cfg: MgNOConfig) -> int:
    """Exact number of scalar parameters (frozen tensors excluded)."""
    params = init_params(cfg)
    total = 0
    for name, arr in params.named_arrays():
        if name in params.frozen:
            continue
        total += int(np.size(arr))
    return total


# ---------------------------------------------------------------------------
# zero-shot super-resolution: every extra level is a pure change of sampling
# around the trained hierarchy, with no smoothing of its own (iteration count
# zero is a legal level).  The descent leg decimates the fine input onto the
# training lattice; the ascent leg interpolates the prediction back with the
# classical transfer stencil, whose unit centre weight preserves nodal values.
# Reusing trained level-1 kernels at the new level instead was measured to
# destroy the prediction scale, because the lifting kernel then acts on the
# fine lattice the layer never saw during training.
# ---------------------------------------------------------------------------

_INTERP_STENCIL = np.array([[0.0, 0.5, 0.5],
                            [0.5, 1.0, 0.5],
                            [0.5, 0.5, 0.0]])


def _interp_kernel(channels: int) -> np.ndarray:
    w = np.zeros((channels, channels, 4, 4))
    for c in range(channels):
        w[c, c, :3, :3] = _INTERP_STENCIL
    return w


def forward_batch_superres(x: np.ndarray, params: MgNOParams, cfg: MgNOConfig,
                           extra_levels: int) -> np.ndarray:
    """Evaluate a trained model on a grid 2^k times finer than it was trained
    on: decimate to the training lattice, run the operator, prolong back."""
    if extra_levels < 0:
        raise ValueError("extra_levels must be >= 0")
    if x.shape[2] % 2 ** extra_levels or x.shape[3] % 2 ** extra_levels:
        raise ValueError(f"grid {x.shape[2]}x{x.shape[3]} not divisible by "
                         f"2^{extra_levels}")
    arr = x
    for _ in range(extra_levels):
        arr = arr[:, :, 0::2, 0::2]
    out = forward_batch(EvalGraph(), np.ascontiguousarray(arr), params, cfg)
    if extra_levels:
        interp = _interp_kernel(cfg.out_channels)
        fold = cfg.restrict_boundary
        for _ in range(extra_levels):
            out = conv_transpose2d_cnhw(out, interp, fold)
    return out


def forward_superres(u: Field, params: MgNOParams, cfg: MgNOConfig,
                     extra_levels: int) -> Field:
    out = forward_batch_superres(u.data[:, None], params, cfg, extra_levels)
    return Field(out[:, 0])


# ---------------------------------------------------------------------------
# checkpoints: config.json + per-layer weight directories + MGT1 files
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, params: MgNOParams,
                    cfg: MgNOConfig, extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    doc = {"format": CHECKPOINT_FORMAT, "model": cfg.to_dict(),
           "frozen": sorted(params.frozen)}
    if extra:
        doc.update(extra)
    with open(os.path.join(path, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for i, lp in enumerate(params.layers):
        ldir = os.path.join(path, f"layer_{i + 1:02d}")
        mg.save_weights(os.path.join(ldir, "wmg"), lp.wmg, cfg.layer_mg_config(i))
        mgt.write_mgt(os.path.join(ldir, "bmat.mgt"), lp.bmat)
        mgt.write_mgt(os.path.join(ldir, "bvec.mgt"), lp.bvec)
    mg.save_weights(os.path.join(path, "output", "wmg"), params.out_wmg,
                    cfg.output_mg_config())


def load_checkpoint(path: str | os.PathLike) -> tuple[MgNOParams, MgNOConfig]:
    with open(os.path.join(path, "config.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    cfg = MgNOConfig.from_dict(doc["model"])
    layers = []
    for i in range(cfg.layers):
        ldir = os.path.join(path, f"layer_{i + 1:02d}")
        wmg, _ = mg.load_weights(os.path.join(ldir, "wmg"))
        layers.append(LayerParams(
            wmg=wmg,
            bmat=mgt.read_mgt(os.path.join(ldir, "bmat.mgt")),
            bvec=mgt.read_mgt(os.path.join(ldir, "bvec.mgt")),
        ))
    out_wmg, _ = mg.load_weights(os.path.join(path, "output", "wmg"))
    return MgNOParams(layers=layers, out_wmg=out_wmg,
                      frozen=set(doc.get("frozen", []))), cfg
