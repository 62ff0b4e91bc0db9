"""Recursive sparse joint attention.

The attention sub-block of a joint-attention transformer block is unrolled
over several latent steps. Each step routes every vision token through one
low-rank adapter expert (chosen by the gate with Gumbel exploration during
training), attends jointly against the fixed text stream, and feeds the
result forward. Intermediate steps use only the adapter deltas as Q/K/V
and add the pre-loop tokens back as a residual; the final step adds the
frozen base projections and skips the residual. Text tokens are modulated
and projected once before the loop and reused at every step; the output
projection and gated residual are applied once after the loop.

Structural contract per forward pass: adapters fire on exactly
``latent_steps`` steps, the base vision projection contributes exactly
once, the residual is added on exactly ``latent_steps - 1`` steps, and the
context Q/K/V are computed exactly once. ``StepCounters`` records these
for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import ExpertBank, lora_apply
from .mmdit import (
    MmditBlockParams,
    _align,
    modulate,
    modulation,
    multi_head_attention,
)
from .routing import (
    GateNetwork,
    RoutingDecision,
    dispatch_and_reassemble,
    gate_logits,
    gumbel_select,
    straight_through_scale,
)
from .rng import Rng
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    concat,
    matmul,
    mul,
    narrow,
    reshape,
    softmax,
    tmean,
)


@dataclass
class RecursionConfig:
    """Shape of the recursive component."""

    experts: int
    latent_steps: int
    tau: float = 5.0
    target_layers: tuple[int, ...] = ()
    remodulate_per_step: bool = False
    route_per: str = "token"  # "token" or "step" (one expert per step)
    gate_conditioning: str = "full"  # "full" or "tokens_only" (ablation)
    balance_weight: float = 0.01

    def validate(self) -> None:
        if self.experts < 1:
            raise ConfigError(f"experts must be >= 1, got {self.experts}")
        if self.latent_steps < 1:
            raise ConfigError(f"latent_steps must be >= 1, got {self.latent_steps}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.route_per not in ("token", "step"):
            raise ConfigError(f"route_per must be 'token' or 'step', got {self.route_per!r}")
        if self.gate_conditioning not in ("full", "tokens_only"):
            raise ConfigError(
                f"gate_conditioning must be 'full' or 'tokens_only', "
                f"got {self.gate_conditioning!r}"
            )


@dataclass
class TraceStep:
    """Detached per-step routing and state snapshot."""

    selected: np.ndarray  # [rows] routed winner per row
    soft_probs: np.ndarray  # [rows, M]
    tokens: np.ndarray  # [B, Nx, D] vision state after the step


@dataclass
class RecursionTrace:
    """Observation-only record of one forward pass; never touches the graph."""

    steps: list[TraceStep] = field(default_factory=list)
    diffusion_t: int = 0
    cond_ids: np.ndarray | None = None
    sample_ids: np.ndarray | None = None
    gate_conditioning: str = "full"
    latent_steps: int = 0
    experts: int = 0


@dataclass
class RecursionRecord:
    """Graph-attached per-step capture for training-time losses."""

    step_logits: list[Tensor] = field(default_factory=list)
    step_soft: list[Tensor] = field(default_factory=list)
    step_selected: list[np.ndarray] = field(default_factory=list)
    step_states: list[Tensor] = field(default_factory=list)
    step_attention: list[Tensor] = field(default_factory=list)
    residual: Tensor | None = None


@dataclass
class StepCounters:
    """Structural-contract counters, incremented during the forward pass."""

    adapter_steps: int = 0
    base_projections: int = 0
    residual_adds: int = 0
    context_preattention: int = 0


def recursive_attention(
    x: Tensor,
    c: Tensor,
    y: Tensor,
    block: MmditBlockParams,
    bank: ExpertBank,
    gate: GateNetwork,
    cfg: RecursionConfig,
    rng: Rng | None,
    *,
    training: bool = True,
    trace: RecursionTrace | None = None,
    record: RecursionRecord | None = None,
    counters: StepCounters | None = None,
    forced_selection: np.ndarray | None = None,
    ste: bool = True,
) -> tuple[Tensor, Tensor]:
    """Run the recursive attention sub-block; returns the two updated streams.

    ``forced_selection`` (shape [latent_steps, rows]) replays or teacher-
    forces the per-step expert choice without consuming rng. ``ste=False``
    detaches the straight-through factor, leaving only the exact gradient
    paths (used for finite-difference verification and teacher forcing).
    """
    cfg.validate()
    if bank.size != cfg.experts:
        raise ConfigError(f"bank has {bank.size} experts, config says {cfg.experts}")
    if gate.experts != cfg.experts:
        raise ConfigError(f"gate scores {gate.experts} experts, config says {cfg.experts}")
    if x.shape[-1] != block.dim or c.shape[-1] != block.dim:
        raise ShapeError(f"token width mismatch: x {x.shape}, c {c.shape}, dim {block.dim}")

    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
        c = reshape(c, (1,) + c.shape)
    b, nx, d = x.shape
    nc = c.shape[1]
    has_ctx = nc > 0
    t_total = cfg.latent_steps

    mod = modulation(block, y)
    x_tilde = modulate(x, mod.alpha_x, mod.beta_x)
    x_residual = x_tilde
    if has_ctx:
        c_tilde = modulate(c, mod.alpha_c, mod.beta_c)
        ctx_q = matmul(c_tilde, block.w_q_c)
        ctx_k = matmul(c_tilde, block.w_k_c)
        ctx_v = matmul(c_tilde, block.w_v_c)
    if counters is not None:
        counters.context_preattention += 1

    ctx_attn = None
    state = x_tilde
    for t_latent in range(1, t_total + 1):
        use_base = t_latent == t_total

        adapter_in = (
            modulate(state, mod.alpha_x, mod.beta_x) if cfg.remodulate_per_step else state
        )

        # Gate sees the evolving state (optionally conditioning-ablated).
        if cfg.gate_conditioning == "full":
            logits3 = gate_logits(state, y, t_latent, gate)
        else:
            logits3 = gate.logits(state)
        if cfg.route_per == "step":
            row_logits = tmean(logits3, axis=1) if logits3.ndim == 3 else logits3
        else:
            row_logits = reshape(logits3, (b * nx, cfg.experts))

        if forced_selection is not None:
            sel = np.asarray(forced_selection[t_latent - 1], dtype=np.int64)
            decision = RoutingDecision(
                row_logits, softmax(row_logits * (1.0 / cfg.tau), axis=1), sel
            )
        else:
            decision = gumbel_select(row_logits, cfg.tau, rng, training)

        if cfg.route_per == "step":
            token_selected = np.repeat(decision.selected, nx)
        else:
            token_selected = decision.selected
        token_decision = RoutingDecision(
            decision.logits, decision.soft_probs, token_selected
        )

        if ste:
            scale = straight_through_scale(decision)
            if cfg.route_per == "step":
                scale = reshape(scale, (b, 1, 1))
            else:
                scale = reshape(scale, (b, nx, 1))
        else:
            scale = None

        def routed_delta(target: str) -> Tensor:
            delta = dispatch_and_reassemble(
                adapter_in,
                token_decision,
                bank,
                lambda adapter, seg, _t=target: lora_apply(adapter, _t, seg),
            )
            return mul(scale, delta) if scale is not None else delta

        q_vis = routed_delta("q")
        k_vis = routed_delta("k")
        v_vis = routed_delta("v")
        if counters is not None:
            counters.adapter_steps += 1
        if use_base:
            q_vis = matmul(state, block.w_q_x) + q_vis
            k_vis = matmul(state, block.w_k_x) + k_vis
            v_vis = matmul(state, block.w_v_x) + v_vis
            if counters is not None:
                counters.base_projections += 1

        if has_ctx:
            q = concat([ctx_q, q_vis], axis=1)
            k = concat([ctx_k, k_vis], axis=1)
            v = concat([ctx_v, v_vis], axis=1)
        else:
            q, k, v = q_vis, k_vis, v_vis
        attn = multi_head_attention(q, k, v, block.heads)
        if has_ctx:
            ctx_attn = narrow(attn, 1, 0, nc)
            a_x = narrow(attn, 1, nc, nx)
        else:
            a_x = attn

        if use_base:
            state = a_x
        else:
            state = a_x + x_residual
            if counters is not None:
                counters.residual_adds += 1

        if record is not None:
            record.step_logits.append(row_logits)
            record.step_soft.append(decision.soft_probs)
            record.step_selected.append(decision.selected.copy())
            record.step_states.append(state)
            record.step_attention.append(a_x)
            record.residual = x_residual
        if trace is not None:
            trace.steps.append(
                TraceStep(
                    selected=decision.selected.copy(),
                    soft_probs=decision.soft_probs.data.copy(),
                    tokens=state.data.copy(),
                )
            )

    if trace is not None:
        trace.latent_steps = t_total
        trace.experts = cfg.experts
        trace.gate_conditioning = cfg.gate_conditioning

    x_out = x + mul(_align(mod.gamma_x, x), matmul(state, block.w_o))
    if has_ctx:
        c_out = c + mul(_align(mod.gamma_c, c), matmul(ctx_attn, block.w_o))
    else:
        c_out = c
    if squeeze:
        x_out = reshape(x_out, x_out.shape[1:])
        c_out = reshape(c_out, c_out.shape[1:])
    return x_out, c_out


def collect_trace(
    x: Tensor,
    c: Tensor,
    y: Tensor,
    block: MmditBlockParams,
    bank: ExpertBank,
    gate: GateNetwork,
    cfg: RecursionConfig,
    rng: Rng | None,
    *,
    training: bool = True,
    diffusion_t: int = 0,
    cond_ids: np.ndarray | None = None,
    sample_ids: np.ndarray | None = None,
) -> tuple[tuple[Tensor, Tensor], RecursionTrace]:
    """Forward pass with tracing on; outputs are bit-identical to an
    untraced run with the same inputs and rng state."""
    trace = RecursionTrace(
        diffusion_t=diffusion_t, cond_ids=cond_ids, sample_ids=sample_ids
    )
    out = recursive_attention(
        x, c, y, block, bank, gate, cfg, rng, training=training, trace=trace
    )
    return out, trace


__all__ = [
    "RecursionConfig",
    "TraceStep",
    "RecursionTrace",
    "RecursionRecord",
    "StepCounters",
    "recursive_attention",
    "collect_trace",
]
