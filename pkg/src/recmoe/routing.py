"""Per-token expert selection: gate network, Gumbel-Softmax hard routing,
token dispatch/reassembly, and the expert balance loss.

The gate scores each vision token from the sum of the token itself, the
conditioning vector, and a sinusoidal embedding of the latent step. During
training, Gumbel(0,1) noise is added to the logits and a single expert is
picked per token by argmax; gradients reach the gate through the softened
probabilities via a straight-through scale whose forward value is exactly
one. Inference is noise-free argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import ExpertBank
from .rng import Rng
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    concat,
    gelu,
    index_select,
    matmul,
    mul,
    narrow,
    reshape,
    sinusoidal_embed,
    softmax,
    stop_gradient,
    tmean,
    tsum,
)


@dataclass
class GateNetwork:
    """Two-layer GELU MLP mapping a [D] gate input to M expert logits.

    The output layer starts at zero so routing begins uniform; Gumbel noise
    then supplies the exploration.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def experts(self) -> int:
        return self.w2.shape[1]

    def logits(self, gate_input: Tensor) -> Tensor:
        h = gelu(matmul(gate_input, self.w1) + self.b1)
        return matmul(h, self.w2) + self.b2

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}w1": self.w1,
            f"{prefix}b1": self.b1,
            f"{prefix}w2": self.w2,
            f"{prefix}b2": self.b2,
        }


def init_gate(dim: int, experts: int, rng: Rng, hidden: int | None = None) -> GateNetwork:
    if experts < 1:
        raise ConfigError(f"gate needs >= 1 experts, got {experts}")
    hidden = dim if hidden is None else hidden
    return GateNetwork(
        w1=Tensor(rng.spawn(0).normal((dim, hidden), std=1.0 / np.sqrt(dim)), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(np.zeros((hidden, experts)), requires_grad=True),
        b2=Tensor(np.zeros(experts), requires_grad=True),
    )


@dataclass
class RoutingDecision:
    """Routing outcome for a flat batch of tokens.

    ``soft_probs`` stays attached to the graph (the straight-through path);
    ``selected`` is the hard per-token winner.
    """

    logits: Tensor  # [T, M]
    soft_probs: Tensor  # [T, M]
    selected: np.ndarray  # [T] int64
    noisy_logits: np.ndarray | None = None  # [T, M], training mode only


@dataclass
class TokenPermutation:
    """Expert-grouped ordering of a flat token axis and its inverse."""

    forward: np.ndarray  # original index of each grouped position
    inverse: np.ndarray  # grouped position of each original index
    group_sizes: list[int]

    @classmethod
    def from_selection(cls, selected: np.ndarray, experts: int) -> "TokenPermutation":
        groups = [np.nonzero(selected == m)[0] for m in range(experts)]
        forward = np.concatenate(groups) if groups else np.zeros(0, dtype=np.int64)
        inverse = np.empty_like(forward)
        inverse[forward] = np.arange(forward.size)
        return cls(forward=forward, inverse=inverse, group_sizes=[g.size for g in groups])


def gate_logits(
    x_tokens: Tensor, y: Tensor, t_latent: int, gate: GateNetwork
) -> Tensor:
    """Per-token expert logits from (token + conditioning + step embedding).

    ``x_tokens`` is [N, D] or [B, N, D]; ``y`` is [D] or [B, D]; rows are
    scored independently.
    """
    if t_latent < 1:
        raise ConfigError(f"latent step must be >= 1, got {t_latent}")
    d = x_tokens.shape[-1]
    if y.shape[-1] != d:
        raise ShapeError(f"gate width mismatch: tokens {x_tokens.shape}, y {y.shape}")
    step = sinusoidal_embed(t_latent, d)
    if y.ndim == 2 and x_tokens.ndim == 3:
        y = reshape(y, (y.shape[0], 1, d))
    gate_input = x_tokens + y + step
    return gate.logits(gate_input)


def gumbel_select(
    logits: Tensor, tau: float, rng: Rng | None, training: bool
) -> RoutingDecision:
    """Hard top-1 expert choice with Gumbel exploration while training.

    Training: z = logits + Gumbel(0,1); soft_probs = softmax(z / tau);
    selected = rowwise argmax of z. Inference: no noise, argmax of logits.
    """
    if tau <= 0:
        raise ConfigError(f"gumbel temperature must be > 0, got {tau}")
    if logits.ndim != 2:
        raise ShapeError(f"gumbel_select expects [tokens, M] logits, got {logits.shape}")
    if training:
        if rng is None:
            raise ConfigError("training-mode selection needs an rng for Gumbel noise")
        noise = rng.gumbel(logits.shape)
        z = logits + Tensor(noise)
        soft = softmax(z * (1.0 / tau), axis=1)
        selected = np.argmax(z.data, axis=1)
        return RoutingDecision(logits, soft, selected, noisy_logits=z.data.copy())
    soft = softmax(logits * (1.0 / tau), axis=1)
    selected = np.argmax(logits.data, axis=1)
    return RoutingDecision(logits, soft, selected)


def straight_through_scale(decision: RoutingDecision) -> Tensor:
    """Per-token factor [T, 1]: exactly 1 forward, soft-probability backward.

    Multiplying the selected expert's output by this routes gradient into
    the gate for the winning expert only (winner-takes-all allocation).
    """
    t, m = decision.soft_probs.shape
    flat = reshape(decision.soft_probs, (t * m,))
    picked = index_select(flat, np.arange(t) * m + decision.selected)
    ste = Tensor(np.ones(t)) + (picked - stop_gradient(picked))
    return reshape(ste, (t, 1))


def dispatch_and_reassemble(
    x_tokens: Tensor, decision: RoutingDecision, bank: ExpertBank, apply
) -> Tensor:
    """Route tokens through their selected expert and restore order.

    Tokens are flattened over leading axes, grouped per expert, transformed
    by ``apply(adapter, group)``, and scattered back so output position
    (b, n) corresponds to input position (b, n). With identity experts the
    round trip is exact.
    """
    shape = x_tokens.shape
    d = shape[-1]
    total = int(np.prod(shape[:-1]))
    if decision.selected.shape[0] != total:
        raise ShapeError(
            f"decision covers {decision.selected.shape[0]} tokens, input has {total}"
        )
    if decision.selected.size and (
        decision.selected.min() < 0 or decision.selected.max() >= bank.size
    ):
        raise ShapeError(
            f"selected expert out of range [0, {bank.size}): "
            f"[{decision.selected.min()}, {decision.selected.max()}]"
        )
    flat = reshape(x_tokens, (total, d))
    perm = TokenPermutation.from_selection(decision.selected, bank.size)
    grouped = index_select(flat, perm.forward)
    outputs = []
    start = 0
    for m, size in enumerate(perm.group_sizes):
        if size == 0:
            continue
        segment = narrow(grouped, 0, start, size)
        outputs.append(apply(bank.adapters[m], segment))
        start += size
    merged = outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)
    restored = index_select(merged, perm.inverse)
    return reshape(restored, shape)


def balance_loss(soft_probs: Tensor, selected: np.ndarray) -> Tensor:
    """Load-balancing objective M * sum_m f_m * pbar_m.

    f_m is the hard fraction of tokens routed to expert m (constant) and
    pbar_m the mean soft probability (differentiable). Uniform usage and
    probabilities give exactly 1; full collapse onto one expert gives M.
    """
    t, m = soft_probs.shape
    if t < 1:
        raise ConfigError("balance_loss needs at least one token")
    counts = np.bincount(np.asarray(selected, dtype=np.int64), minlength=m)
    frac = Tensor(counts.astype(np.float64) / t)
    mean_probs = tmean(soft_probs, axis=0)
    return tsum(mul(frac, mean_probs)) * float(m)


def expert_usage(selected: np.ndarray, experts: int) -> np.ndarray:
    """Fraction of tokens routed to each expert."""
    counts = np.bincount(np.asarray(selected, dtype=np.int64), minlength=experts)
    return counts / max(1, selected.size)


__all__ = [
    "GateNetwork",
    "init_gate",
    "RoutingDecision",
    "TokenPermutation",
    "gate_logits",
    "gumbel_select",
    "straight_through_scale",
    "dispatch_and_reassemble",
    "balance_loss",
    "expert_usage",
]
