"""Joint-attention transformer block over a vision and a text token stream.

One block = per-modality modulated layernorm, multi-head attention over the
concatenated streams, a gated residual, then a shared two-layer GELU MLP
with its own modulation and gated residual. Modulation vectors are produced
from the conditioning vector by a learned affine head that starts as the
identity block (both residual gates at zero), the standard adaptive-norm
recipe for stable fine-tuning.

Passing an empty text stream (zero context tokens) turns the block into a
plain self-attention DiT block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    ConfigError,
    ShapeError,
    Tensor,
    concat,
    gelu,
    layernorm,
    matmul,
    mul,
    narrow,
    reshape,
    softmax,
    transpose,
)

# A conditioning vector is a plain [D] (or batched [B, D]) tensor combining
# the diffusion-timestep embedding with the class/text conditioning.
ConditioningVector = Tensor

_MOD_FIELDS = (
    "alpha_x", "beta_x", "gamma_x", "delta_x", "eps_x", "zeta_x",
    "alpha_c", "beta_c", "gamma_c", "delta_c", "eps_c", "zeta_c",
)


@dataclass
class ModulationParams:
    """Per-modality scale/shift/gate vectors derived from conditioning."""

    alpha_x: Tensor
    beta_x: Tensor
    gamma_x: Tensor
    delta_x: Tensor
    eps_x: Tensor
    zeta_x: Tensor
    alpha_c: Tensor
    beta_c: Tensor
    gamma_c: Tensor
    delta_c: Tensor
    eps_c: Tensor
    zeta_c: Tensor


@dataclass
class MmditBlockParams:
    """All weights of one joint-attention block."""

    dim: int
    heads: int
    w_q_x: Tensor
    w_k_x: Tensor
    w_v_x: Tensor
    w_q_c: Tensor
    w_k_c: Tensor
    w_v_c: Tensor
    w_o: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    mod_w: Tensor
    mod_b: Tensor

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = (
            "w_q_x", "w_k_x", "w_v_x", "w_q_c", "w_k_c", "w_v_c", "w_o",
            "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mod_w", "mod_b",
        )
        return {f"{prefix}{n}": getattr(self, n) for n in names}


def init_block_params(dim: int, heads: int, rng: Rng) -> MmditBlockParams:
    """Fresh block weights; the block is the identity map at init."""
    if dim % heads != 0:
        raise ConfigError(f"dim {dim} not divisible by heads {heads}")
    std = 1.0 / math.sqrt(dim)

    def w(key: int, shape, scale: float) -> Tensor:
        return Tensor(rng.spawn(key).normal(shape, std=scale), requires_grad=True)

    hidden = 4 * dim
    # Modulation head: zero weights; biases pass layernorm through (alpha,
    # delta = 1) and gate both residual branches off (gamma, zeta = 0).
    mod_b = np.zeros(12 * dim, dtype=np.float64)
    mod_b[0 * dim : 1 * dim] = 1.0  # alpha_x
    mod_b[3 * dim : 4 * dim] = 1.0  # delta_x
    mod_b[6 * dim : 7 * dim] = 1.0  # alpha_c
    mod_b[9 * dim : 10 * dim] = 1.0  # delta_c
    return MmditBlockParams(
        dim=dim,
        heads=heads,
        w_q_x=w(1, (dim, dim), std),
        w_k_x=w(2, (dim, dim), std),
        w_v_x=w(3, (dim, dim), std),
        w_q_c=w(4, (dim, dim), std),
        w_k_c=w(5, (dim, dim), std),
        w_v_c=w(6, (dim, dim), std),
        w_o=Tensor(np.eye(dim), requires_grad=True),
        mlp_w1=w(7, (dim, hidden), std),
        mlp_b1=Tensor(np.zeros(hidden), requires_grad=True),
        mlp_w2=w(8, (hidden, dim), 1.0 / math.sqrt(hidden)),
        mlp_b2=Tensor(np.zeros(dim), requires_grad=True),
        mod_w=Tensor(np.zeros((dim, 12 * dim)), requires_grad=True),
        mod_b=Tensor(mod_b, requires_grad=True),
    )


def _align(vec: Tensor, tokens: Tensor) -> Tensor:
    """Reshape a per-sample [B, D] vector so it broadcasts over [B, N, D]."""
    if vec.ndim == tokens.ndim - 1 and vec.ndim >= 2:
        return reshape(vec, vec.shape[:-1] + (1,) + vec.shape[-1:])
    return vec


def modulation(params: MmditBlockParams, y: Tensor) -> ModulationParams:
    """Derive the 12 modulation vectors from the conditioning vector.

    ``y`` is [D] or [B, D]; each output piece matches that leading shape.
    """
    d = params.dim
    squeeze = y.ndim == 1
    y2 = reshape(y, (1, d)) if squeeze else y
    h = matmul(y2, params.mod_w) + params.mod_b  # [B, 12D]
    pieces = []
    for i, _ in enumerate(_MOD_FIELDS):
        piece = narrow(h, 1, i * d, d)
        pieces.append(reshape(piece, (d,)) if squeeze else piece)
    return ModulationParams(*pieces)


def modulate(tokens: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """scale * layernorm(tokens) + shift, rowwise over the last axis."""
    if tokens.shape[-1] != scale.shape[-1] or tokens.shape[-1] != shift.shape[-1]:
        raise ShapeError(
            f"modulate width mismatch: tokens {tokens.shape}, "
            f"scale {scale.shape}, shift {shift.shape}"
        )
    return mul(_align(scale, tokens), layernorm(tokens)) + _align(shift, tokens)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Softmax attention over batched [B, N, D] projections.

    Per-head scaling is 1/sqrt(D/heads); with a single head this is the
    plain 1/sqrt(D) scaled dot product.
    """
    b, nq, d = q.shape
    nk = k.shape[-2]
    hd = d // heads
    qh = transpose(reshape(q, (b, nq, heads, hd)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (b, nk, heads, hd)), (0, 2, 1, 3))
    vh = transpose(reshape(v, (b, nk, heads, hd)), (0, 2, 1, 3))
    scores = matmul(qh, transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
    weights = softmax(scores, axis=-1)  # [B, H, Nq, Nk]
    out = matmul(weights, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, nq, d))


def attention_weights(q: Tensor, k: Tensor, heads: int) -> np.ndarray:
    """Attention probabilities only (diagnostics; detached from the graph)."""
    b, nq, d = q.shape
    nk = k.shape[-2]
    hd = d // heads
    qh = q.data.reshape(b, nq, heads, hd).transpose(0, 2, 1, 3)
    kh = k.data.reshape(b, nk, heads, hd).transpose(0, 2, 1, 3)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) / math.sqrt(hd)
    scores -= scores.max(axis=-1, keepdims=True)
    ex = np.exp(scores)
    return ex / ex.sum(axis=-1, keepdims=True)


def _ensure_batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.ndim == 2:
        return reshape(t, (1,) + t.shape), True
    return t, False


def joint_attention(
    x_tokens: Tensor, c_tokens: Tensor, params: MmditBlockParams
) -> tuple[Tensor, Tensor]:
    """Multi-head attention over the concatenated [vision; text] sequence.

    Each branch has its own Q/K/V projections; a single output projection
    is applied before splitting back into the two streams. Accepts [N, D]
    or [B, N, D] token tensors.
    """
    if x_tokens.shape[-1] != params.dim or c_tokens.shape[-1] != params.dim:
        raise ShapeError(
            f"token width mismatch: x {x_tokens.shape}, c {c_tokens.shape}, "
            f"dim {params.dim}"
        )
    x3, squeezed = _ensure_batched(x_tokens)
    c3, _ = _ensure_batched(c_tokens)
    nx, nc = x3.shape[1], c3.shape[1]

    def project(wx, wc):
        px = matmul(x3, wx)
        if nc == 0:
            return px
        return concat([px, matmul(c3, wc)], axis=1)

    q = project(params.w_q_x, params.w_q_c)
    k = project(params.w_k_x, params.w_k_c)
    v = project(params.w_v_x, params.w_v_c)
    out = matmul(multi_head_attention(q, k, v, params.heads), params.w_o)
    a_x = narrow(out, 1, 0, nx)
    a_c = narrow(out, 1, nx, nc)
    if squeezed:
        a_x = reshape(a_x, a_x.shape[1:])
        a_c = reshape(a_c, a_c.shape[1:])
    return a_x, a_c


def mlp_rowwise(tokens: Tensor, params: MmditBlockParams) -> Tensor:
    h = gelu(matmul(tokens, params.mlp_w1) + params.mlp_b1)
    return matmul(h, params.mlp_w2) + params.mlp_b2


def attention_part(
    x: Tensor, c: Tensor, mod: ModulationParams, params: MmditBlockParams
) -> tuple[Tensor, Tensor]:
    """Modulate, attend jointly, and apply the gamma-gated residual."""
    has_ctx = c.shape[-2] > 0
    x_mod = modulate(x, mod.alpha_x, mod.beta_x)
    c_mod = modulate(c, mod.alpha_c, mod.beta_c) if has_ctx else c
    a_x, a_c = joint_attention(x_mod, c_mod, params)
    x = x + mul(_align(mod.gamma_x, x), a_x)
    if has_ctx:
        c = c + mul(_align(mod.gamma_c, c), a_c)
    return x, c


def mlp_part(
    x: Tensor, c: Tensor, mod: ModulationParams, params: MmditBlockParams
) -> tuple[Tensor, Tensor]:
    """Modulated MLP sub-block with the zeta-gated residual."""
    has_ctx = c.shape[-2] > 0
    x_mod = modulate(x, mod.delta_x, mod.eps_x)
    x = x + mul(_align(mod.zeta_x, x), mlp_rowwise(x_mod, params))
    if has_ctx:
        c_mod = modulate(c, mod.delta_c, mod.eps_c)
        c = c + mul(_align(mod.zeta_c, c), mlp_rowwise(c_mod, params))
    return x, c


def block_forward(
    x: Tensor, c: Tensor, y: ConditioningVector, params: MmditBlockParams
) -> tuple[Tensor, Tensor]:
    """One full block: gated attention sub-block, then gated MLP sub-block."""
    mod = modulation(params, y)
    x, c = attention_part(x, c, mod, params)
    return mlp_part(x, c, mod, params)


def empty_context(dim: int, batch: int | None = None) -> Tensor:
    """Zero-length text stream for self-attention (DiT) mode."""
    shape = (0, dim) if batch is None else (batch, 0, dim)
    return Tensor(np.zeros(shape, dtype=np.float64))


__all__ = [
    "ConditioningVector",
    "ModulationParams",
    "MmditBlockParams",
    "init_block_params",
    "modulation",
    "modulate",
    "multi_head_attention",
    "attention_weights",
    "joint_attention",
    "mlp_rowwise",
    "attention_part",
    "mlp_part",
    "block_forward",
    "empty_context",
]
