"""Low-rank adapter experts for the vision-branch Q/K/V projections.

Each expert holds a rank-r update per target matrix, factored as a down
projection A [r, D] and an up projection B [D, r]. ``lora_apply`` returns
only the low-rank delta; the caller decides whether the frozen base
projection is added (intermediate recursion steps omit it, the final step
includes it). B starts at zero so a fresh bank contributes nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import ConfigError, ShapeError, Tensor, matmul, transpose

TARGETS = ("q", "k", "v")


@dataclass
class LoraAdapter:
    """One expert: rank-r factors for each of the q/k/v targets."""

    rank: int
    a_q: Tensor
    b_q: Tensor
    a_k: Tensor
    b_k: Tensor
    a_v: Tensor
    b_v: Tensor

    def factors(self, target: str) -> tuple[Tensor, Tensor]:
        if target not in TARGETS:
            raise ConfigError(f"unknown adapter target {target!r}, expected one of {TARGETS}")
        return getattr(self, f"a_{target}"), getattr(self, f"b_{target}")

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for t in TARGETS:
            out[f"{prefix}a_{t}"] = getattr(self, f"a_{t}")
            out[f"{prefix}b_{t}"] = getattr(self, f"b_{t}")
        return out


@dataclass
class ExpertBank:
    """M adapters sharing rank and width."""

    adapters: list[LoraAdapter]

    @property
    def size(self) -> int:
        return len(self.adapters)

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for m, ad in enumerate(self.adapters):
            out.update(ad.parameters(f"{prefix}expert{m}."))
        return out


def lora_apply(adapter: LoraAdapter, target: str, x: Tensor) -> Tensor:
    """Low-rank delta of one target projection: rows of x through A then B.

    Returns the delta only, never the base projection.
    """
    a, b = adapter.factors(target)
    if x.shape[-1] != a.shape[-1]:
        raise ShapeError(f"lora_apply width mismatch: x {x.shape}, A {a.shape}")
    return matmul(matmul(x, transpose(a)), transpose(b))


def init_expert_bank(experts: int, rank: int, dim: int, rng: Rng) -> ExpertBank:
    """Bank of ``experts`` adapters: A ~ N(0, 1/rank), B = 0."""
    if experts < 1:
        raise ConfigError(f"expert count must be >= 1, got {experts}")
    if not 1 <= rank <= dim:
        raise ConfigError(f"rank must be in [1, {dim}], got {rank}")
    std = 1.0 / math.sqrt(rank)
    adapters = []
    for m in range(experts):
        sub = rng.spawn(m)
        kwargs = {"rank": rank}
        for i, t in enumerate(TARGETS):
            kwargs[f"a_{t}"] = Tensor(sub.spawn(i).normal((rank, dim), std=std), requires_grad=True)
            kwargs[f"b_{t}"] = Tensor(np.zeros((dim, rank)), requires_grad=True)
        adapters.append(LoraAdapter(**kwargs))
    return ExpertBank(adapters)


def adapter_parameter_count(rank: int, dim: int) -> int:
    """Trainable parameters of one adapter for one target matrix."""
    return 2 * rank * dim


__all__ = [
    "TARGETS",
    "LoraAdapter",
    "ExpertBank",
    "lora_apply",
    "init_expert_bank",
    "adapter_parameter_count",
]
