"""Recursive sparse mixture-of-adapters for diffusion transformers.

A dependency-light implementation of hard-routed low-rank adapter experts
inside joint-attention blocks, unrolled over latent refinement steps, with
a self-contained float64 autograd core, a toy class-conditioned diffusion
task, and a frozen-lake visual planning task.
"""

from .tensor import (
    ConfigError,
    ContractError,
    ShapeError,
    Tensor,
    backward,
    finite_diff_grad,
    layernorm,
    matmul,
    no_grad,
    sinusoidal_embed,
    softmax,
)
from .rng import Rng
from .adapters import ExpertBank, LoraAdapter, init_expert_bank, lora_apply
from .mmdit import (
    MmditBlockParams,
    ModulationParams,
    block_forward,
    init_block_params,
    joint_attention,
    modulate,
)
from .routing import (
    GateNetwork,
    RoutingDecision,
    TokenPermutation,
    balance_loss,
    dispatch_and_reassemble,
    gate_logits,
    gumbel_select,
)
from .recursion import (
    RecursionConfig,
    RecursionTrace,
    StepCounters,
    collect_trace,
    recursive_attention,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Tensor",
    "Rng",
    "ShapeError",
    "ConfigError",
    "ContractError",
    "backward",
    "finite_diff_grad",
    "no_grad",
    "matmul",
    "softmax",
    "layernorm",
    "sinusoidal_embed",
    "LoraAdapter",
    "ExpertBank",
    "lora_apply",
    "init_expert_bank",
    "ModulationParams",
    "MmditBlockParams",
    "init_block_params",
    "modulate",
    "joint_attention",
    "block_forward",
    "GateNetwork",
    "RoutingDecision",
    "TokenPermutation",
    "gate_logits",
    "gumbel_select",
    "dispatch_and_reassemble",
    "balance_loss",
    "RecursionConfig",
    "RecursionTrace",
    "StepCounters",
    "recursive_attention",
    "collect_trace",
]
