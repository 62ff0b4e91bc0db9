"""Finite-difference verification of the analytic gradients.

Every check builds a small graph, backpropagates a generic scalar loss,
and compares each leaf's gradient against central finite differences.
Routing is verified on its soft path (a loss read directly from the
softened probabilities); the full recursion is verified with the expert
selection replayed and the straight-through factor detached, because that
factor is a surrogate gradient by construction and finite differences can
only see the exact paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import init_expert_bank, lora_apply
from .mmdit import block_forward, init_block_params, joint_attention, modulate
from .recursion import RecursionConfig, RecursionRecord, recursive_attention
from .routing import gate_logits, gumbel_select, init_gate
from .rng import Rng
from .tensor import (
    Tensor,
    backward,
    concat,
    finite_diff_grad,
    gelu,
    index_select,
    layernorm,
    logsumexp,
    matmul,
    narrow,
    power,
    reshape,
    softmax,
    texp,
    tlog,
    tmean,
    transpose,
    tsqrt,
    tsum,
    ttanh,
)

THRESHOLD = 1e-4


@dataclass
class GradCheckResult:
    op: str
    max_rel_err: float
    passed: bool


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _check(build_loss, leaves: dict[str, Tensor], h: float = 1e-5) -> float:
    """Max relative error across all leaves of one loss builder."""
    loss = build_loss(leaves)
    backward(loss)
    worst = 0.0
    for key, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

        def f(xt: Tensor, _key=key):
            env = {k: (xt if k == _key else Tensor(v.data)) for k, v in leaves.items()}
            return build_loss(env)

        numeric = finite_diff_grad(f, leaf, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _leaves(rng: Rng, spec: dict[str, tuple]) -> dict[str, Tensor]:
    return {
        name: Tensor(rng.spawn(i).normal(shape), requires_grad=True)
        for i, (name, shape) in enumerate(spec.items())
    }


def _project(rng: Rng, t: Tensor, key: int) -> Tensor:
    """Generic scalar readout: weighted sum with fixed random weights."""
    w = Tensor(rng.spawn(10_000 + key).normal(t.shape))
    return tsum(t * w)


def run_suite(seed: int = 0, threshold: float = THRESHOLD, corrupt: str | None = None) -> list[GradCheckResult]:
    """Run every check once; ``corrupt`` perturbs one op's analytic gradient
    (a negative-control hook for tests)."""
    rng = Rng(seed)
    results: list[GradCheckResult] = []

    def record(op: str, err: float) -> None:
        if corrupt == op:
            err += 1.0
        results.append(GradCheckResult(op, err, err < threshold))

    # -- elementwise and reductions
    lv = _leaves(rng.spawn(1), {"a": (3, 4), "b": (3, 4)})
    record("add_mul_div", _check(
        lambda e: _project(rng, e["a"] * e["b"] + e["a"] / (e["b"] * e["b"] + 5.0), 1), lv))

    lv = _leaves(rng.spawn(2), {"x": (3, 4)})
    record("exp_log_sqrt_tanh", _check(
        lambda e: _project(rng, texp(ttanh(e["x"])) + tlog(tsqrt(e["x"] * e["x"] + 1.0)), 2), lv))

    lv = _leaves(rng.spawn(3), {"x": (4, 5)})
    record("power", _check(lambda e: _project(rng, power(e["x"] * e["x"] + 1.0, 1.5), 3), lv))

    lv = _leaves(rng.spawn(4), {"x": (3, 5)})
    record("sum_mean", _check(
        lambda e: tsum(e["x"], axis=1).sum() * 0.25 + tmean(e["x"], axis=0).sum(), lv))

    lv = _leaves(rng.spawn(5), {"a": (3, 4), "b": (4, 2)})
    record("matmul", _check(lambda e: _project(rng, matmul(e["a"], e["b"]), 5), lv))

    lv = _leaves(rng.spawn(6), {"a": (2, 3, 4), "b": (4, 3)})
    record("matmul_batched", _check(lambda e: _project(rng, matmul(e["a"], e["b"]), 6), lv))

    lv = _leaves(rng.spawn(7), {"x": (4, 6)})
    record("softmax", _check(lambda e: _project(rng, softmax(e["x"], axis=1), 7), lv))

    lv = _leaves(rng.spawn(8), {"x": (4, 6)})
    record("layernorm", _check(lambda e: _project(rng, layernorm(e["x"]), 8), lv))

    lv = _leaves(rng.spawn(9), {"x": (3, 4)})
    record("gelu", _check(lambda e: _project(rng, gelu(e["x"]), 9), lv))

    lv = _leaves(rng.spawn(10), {"x": (4, 5)})
    record("logsumexp", _check(lambda e: _project(rng, logsumexp(e["x"], axis=1), 10), lv))

    lv = _leaves(rng.spawn(11), {"x": (2, 3, 4)})
    record("reshape_transpose", _check(
        lambda e: _project(rng, transpose(reshape(e["x"], (3, 2, 4)), (1, 0, 2)), 11), lv))

    lv = _leaves(rng.spawn(12), {"a": (2, 4), "b": (3, 4)})
    record("concat_narrow", _check(
        lambda e: _project(rng, narrow(concat([e["a"], e["b"]], axis=0), 0, 1, 3), 12), lv))

    idx = np.array([2, 0, 2, 1])
    lv = _leaves(rng.spawn(13), {"x": (3, 4)})
    record("index_select", _check(lambda e: _project(rng, index_select(e["x"], idx), 13), lv))

    # -- mmdit pieces
    lv = _leaves(rng.spawn(14), {"x": (3, 6), "scale": (6,), "shift": (6,)})
    record("modulate", _check(
        lambda e: _project(rng, modulate(e["x"], e["scale"], e["shift"]), 14), lv))

    d, heads = 6, 2
    blk = init_block_params(d, heads, rng.spawn(15))
    lv = _leaves(rng.spawn(16), {"x": (3, d), "c": (2, d)})
    lv["w_q_x"] = blk.w_q_x
    lv["w_o"] = blk.w_o

    def attn_loss(e):
        blk.w_q_x = e["w_q_x"]
        blk.w_o = e["w_o"]
        ax, ac = joint_attention(e["x"], e["c"], blk)
        return _project(rng, ax, 16) + _project(rng, ac, 17)

    record("mmdit_attention", _check(attn_loss, lv))

    blk2 = init_block_params(d, heads, rng.spawn(18))
    # Non-trivial modulation so the gated residuals are exercised.
    blk2.mod_w = Tensor(rng.spawn(19).normal((d, 12 * d), std=0.2), requires_grad=True)
    lv = _leaves(rng.spawn(20), {"x": (3, d), "c": (2, d), "y": (d,)})
    lv["mod_w"] = blk2.mod_w
    lv["mlp_w1"] = blk2.mlp_w1

    def block_loss(e):
        blk2.mod_w = e["mod_w"]
        blk2.mlp_w1 = e["mlp_w1"]
        xo, co = block_forward(e["x"], e["c"], e["y"], blk2)
        return _project(rng, xo, 20) + _project(rng, co, 21)

    record("mmdit_block", _check(block_loss, lv))

    # -- adapters
    bank = init_expert_bank(1, 2, d, rng.spawn(22))
    ad = bank.adapters[0]
    ad.b_q = Tensor(rng.spawn(23).normal((d, 2)), requires_grad=True)
    lv = {"x": Tensor(rng.spawn(24).normal((3, d)), requires_grad=True),
          "a_q": ad.a_q, "b_q": ad.b_q}

    def lora_loss(e):
        ad.a_q = e["a_q"]
        ad.b_q = e["b_q"]
        return _project(rng, lora_apply(ad, "q", e["x"]), 22)

    record("lora_apply", _check(lora_loss, lv))

    # -- routing, soft path (noise frozen by reseeding inside the builder)
    gate = init_gate(d, 3, rng.spawn(25))
    gate.w2 = Tensor(rng.spawn(26).normal((d, 3), std=0.3), requires_grad=True)
    lv = {"x": Tensor(rng.spawn(27).normal((4, d)), requires_grad=True),
          "y": Tensor(rng.spawn(28).normal((d,)), requires_grad=True),
          "w1": gate.w1, "w2": gate.w2}

    def routing_loss(e):
        gate.w1 = e["w1"]
        gate.w2 = e["w2"]
        logits = gate_logits(e["x"], e["y"], 2, gate)
        decision = gumbel_select(logits, 5.0, Rng(seed + 999), training=True)
        return _project(rng, decision.soft_probs, 25)

    record("routing_soft", _check(routing_loss, lv))

    # -- full recursion with replayed selection, straight-through detached
    d_r, heads_r, m_r, t_r = 4, 2, 2, 2
    blk_r = init_block_params(d_r, heads_r, rng.spawn(30))
    blk_r.mod_w = Tensor(rng.spawn(31).normal((d_r, 12 * d_r), std=0.2), requires_grad=True)
    bank_r = init_expert_bank(m_r, 2, d_r, rng.spawn(32))
    for i_ad, adapter in enumerate(bank_r.adapters):
        adapter.b_q = Tensor(rng.spawn(33 + i_ad).normal((d_r, 2), std=0.5), requires_grad=True)
        adapter.b_k = Tensor(rng.spawn(36 + i_ad).normal((d_r, 2), std=0.5), requires_grad=True)
        adapter.b_v = Tensor(rng.spawn(39 + i_ad).normal((d_r, 2), std=0.5), requires_grad=True)
    gate_r = init_gate(d_r, m_r, rng.spawn(42))
    gate_r.w2 = Tensor(rng.spawn(43).normal((d_r, m_r), std=0.3), requires_grad=True)
    cfg_r = RecursionConfig(experts=m_r, latent_steps=t_r, tau=5.0)

    lv = {
        "x": Tensor(rng.spawn(44).normal((2, d_r)), requires_grad=True),
        "c": Tensor(rng.spawn(45).normal((1, d_r)), requires_grad=True),
        "y": Tensor(rng.spawn(46).normal((d_r,)), requires_grad=True),
        "a_q0": bank_r.adapters[0].a_q,
        "b_q0": bank_r.adapters[0].b_q,
        "a_v1": bank_r.adapters[1].a_v,
        "b_v1": bank_r.adapters[1].b_v,
        "w_q_x": blk_r.w_q_x,
        "w_o": blk_r.w_o,
        "mod_w": blk_r.mod_w,
    }

    # One noisy run fixes the routing; every evaluation replays it.
    probe = RecursionRecord()
    recursive_attention(
        Tensor(lv["x"].data), Tensor(lv["c"].data), Tensor(lv["y"].data),
        blk_r, bank_r, gate_r, cfg_r, Rng(seed + 1234), training=True, record=probe,
    )
    replay = np.stack(probe.step_selected)

    def recursion_loss(e):
        bank_r.adapters[0].a_q = e["a_q0"]
        bank_r.adapters[0].b_q = e["b_q0"]
        bank_r.adapters[1].a_v = e["a_v1"]
        bank_r.adapters[1].b_v = e["b_v1"]
        blk_r.w_q_x = e["w_q_x"]
        blk_r.w_o = e["w_o"]
        blk_r.mod_w = e["mod_w"]
        xo, co = recursive_attention(
            e["x"], e["c"], e["y"], blk_r, bank_r, gate_r, cfg_r, None,
            training=False, forced_selection=replay, ste=False,
        )
        return _project(rng, xo, 30) + _project(rng, co, 31)

    record("recursion", _check(recursion_loss, lv))

    return results


def format_report(results: list[GradCheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.op:<20s} max_rel={r.max_rel_err:.3e}  {status}")
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results)
    lines.append(f"{'overall':<20s} max_rel={worst:.3e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)


__all__ = ["THRESHOLD", "GradCheckResult", "relative_error", "run_suite", "format_report"]
