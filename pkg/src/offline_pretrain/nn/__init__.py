"""Minimal dense neural-network stack on a numpy autodiff tape."""

from .autograd import StaleTapeError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .mlp import (MLPConfig, Network, ParamTree, apply_mlp, backward, forward, init_mlp,
                  input_gradient, layernorm)
from .optim import OptimizerState, adam_step, polyak_update
from .policy import GaussianPolicyHead, sample_squashed_gaussian, squashed_log_prob

__all__ = [
    "GaussianPolicyHead", "MLPConfig", "Network", "OptimizerState", "ParamTree", "StaleTapeError",
    "Tape", "Tensor", "adam_step", "apply_mlp", "backward", "forward", "init_mlp",
    "input_gradient", "layernorm", "load_checkpoint", "polyak_update",
    "sample_squashed_gaussian", "save_checkpoint", "squashed_log_prob",
]
