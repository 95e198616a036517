"""Multigrid neural operator: convolutional V-cycles for PDE surrogates.

The package bundles the dense field/convolution core, the V-cycle operator
with a classical Poisson preset, the stacked operator network, a hand-rolled
reverse-mode training engine, a Darcy-flow data pipeline, and a CLI.
"""

from .tensor import (BoundaryMode, Field, Kernel, pad, conv2d,
                     conv_transpose2d, gelu, channel_mix)
from .multigrid import (MgConfig, MgWeights, ConvergenceReport, smooth,
                        restrict_residual, apply_wmg, classical_poisson_weights,
                        classical_poisson_config, estimate_contraction)
from .network import (MgNOConfig, MgNOParams, init_params, forward,
                      param_count, save_checkpoint, load_checkpoint,
                      forward_superres)
from .training import (TrainConfig, TrainHistory, rel_l2, rel_h1, cosine_lr,
                       adam_step, train, evaluate, evaluate_superres,
                       standardize, grad_check)
from .darcy import (CoefficientSpec, DarcyProblem, Dataset, gen_multiscale_trig,
                    gen_two_phase_approx, assemble_apply, solve_reference,
                    build_dataset)

__all__ = [
    "BoundaryMode", "Field", "Kernel", "pad", "conv2d", "conv_transpose2d",
    "gelu", "channel_mix",
    "MgConfig", "MgWeights", "ConvergenceReport", "smooth", "restrict_residual",
    "apply_wmg", "classical_poisson_weights", "classical_poisson_config",
    "estimate_contraction",
    "MgNOConfig", "MgNOParams", "init_params", "forward", "param_count",
    "save_checkpoint", "load_checkpoint", "forward_superres",
    "TrainConfig", "TrainHistory", "rel_l2", "rel_h1", "cosine_lr", "adam_step",
    "train", "evaluate", "evaluate_superres", "standardize", "grad_check",
    "CoefficientSpec", "DarcyProblem", "Dataset", "gen_multiscale_trig",
    "gen_two_phase_approx", "assemble_apply", "solve_reference", "build_dataset",
]
