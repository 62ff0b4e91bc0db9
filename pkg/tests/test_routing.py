"""Gate, Gumbel selection, dispatch/reassembly, and balance loss."""

import numpy as np
import pytest

from recmoe import (
    Rng,
    Tensor,
    backward,
    balance_loss,
    dispatch_and_reassemble,
    gate_logits,
    gumbel_select,
    init_expert_bank,
)
from recmoe.optim import AdamW
from recmoe.routing import (
    RoutingDecision,
    TokenPermutation,
    expert_usage,
    init_gate,
    straight_through_scale,
)
from recmoe.tensor import ConfigError, tsum

from conftest import assert_allclose


# -- gate logits -----------------------------------------------------------------


def test_zero_gate_gives_uniform_probs(rng):
    d, m = 8, 4
    gate = init_gate(d, m, rng)
    gate.w1.data = np.zeros_like(gate.w1.data)
    x = Tensor(rng.normal((5, d)))
    y = Tensor(rng.normal((d,)))
    logits = gate_logits(x, y, 1, gate)
    assert np.array_equal(logits.data, np.zeros((5, m)))
    decision = gumbel_select(logits, 5.0, None, training=False)
    assert_allclose(decision.soft_probs.data, np.full((5, m), 0.25))


def test_identical_tokens_get_identical_rows(rng):
    d, m = 8, 3
    gate = init_gate(d, m, rng)
    gate.w2.data = rng.spawn(1).normal((d, m))
    row = rng.spawn(2).normal((d,))
    x = Tensor(np.stack([row, row]))
    y = Tensor(rng.spawn(3).normal((d,)))
    logits = gate_logits(x, y, 2, gate).data
    assert np.array_equal(logits[0], logits[1])


def test_single_token_matches_matvec_oracle(rng):
    from scipy.special import erf

    d, m = 6, 2
    gate = init_gate(d, m, rng)
    gate.w2.data = rng.spawn(4).normal((d, m))
    x = rng.spawn(5).normal((1, d))
    y = rng.spawn(6).normal((d,))
    from recmoe.tensor import _sinusoidal

    gi = x[0] + y + _sinusoidal(np.array([3.0]), d)[0]
    h = gi @ gate.w1.data + gate.b1.data
    h = 0.5 * h * (1.0 + erf(h / np.sqrt(2.0)))
    expected = h @ gate.w2.data + gate.b2.data
    out = gate_logits(Tensor(x), Tensor(y), 3, gate).data[0]
    assert_allclose(out, expected, tol=1e-12)


def test_gate_rejects_bad_step():
    gate = init_gate(4, 2, Rng(0))
    with pytest.raises(ConfigError):
        gate_logits(Tensor(np.zeros((2, 4))), Tensor(np.zeros(4)), 0, gate)


# -- gumbel selection ---------------------------------------------------------------


def test_inference_is_deterministic_argmax():
    logits = Tensor(np.array([[2.0, 1.0], [0.1, 0.3]]))
    decision = gumbel_select(logits, 5.0, None, training=False)
    assert decision.selected.tolist() == [0, 1]
    assert decision.noisy_logits is None


def test_training_selection_matches_noisy_argmax(rng):
    logits = Tensor(rng.normal((20, 4)))
    decision = gumbel_select(logits, 5.0, rng.spawn(1), training=True)
    assert np.array_equal(decision.selected, np.argmax(decision.noisy_logits, axis=1))


def test_argmax_invariant_to_row_shift(rng):
    logits = rng.normal((30, 3))
    noise = Rng(7).gumbel((30, 3))
    base = np.argmax(logits + noise, axis=1)
    shifted = np.argmax(logits + 5.0 + noise, axis=1)
    assert np.array_equal(base, shifted)


def test_tau_to_zero_gives_one_hot(rng):
    logits = Tensor(rng.normal((10, 4)))
    decision = gumbel_select(logits, 1e-4, None, training=False)
    probs = decision.soft_probs.data
    for i, sel in enumerate(decision.selected):
        off = np.delete(probs[i], sel)
        assert off.max() < 1e-6
        assert probs[i, sel] > 1.0 - 1e-6


def test_tau_default_from_config():
    from recmoe.recursion import RecursionConfig

    assert RecursionConfig(experts=2, latent_steps=2).tau == 5.0


def test_gumbel_max_selection_frequency():
    # With logits [ln 2, ln 1], the Gumbel-max trick selects expert 0 with
    # probability 2/3 (softmax of the logits).
    logits = Tensor(np.tile([np.log(2.0), 0.0], (100_000, 1)))
    decision = gumbel_select(logits, 5.0, Rng(31337), training=True)
    freq = float(np.mean(decision.selected == 0))
    assert abs(freq - 2.0 / 3.0) < 0.02


def test_invalid_tau():
    with pytest.raises(ConfigError):
        gumbel_select(Tensor(np.zeros((2, 2))), 0.0, None, training=False)


def test_straight_through_scale_is_exactly_one_forward(rng):
    logits = Tensor(rng.normal((6, 3)), requires_grad=True)
    decision = gumbel_select(logits, 5.0, rng.spawn(2), training=True)
    scale = straight_through_scale(decision)
    assert np.array_equal(scale.data, np.ones((6, 1)))
    backward(tsum(scale * Tensor(rng.normal((6, 1)))))
    assert logits.grad is not None and np.abs(logits.grad).max() > 0


# -- dispatch and reassembly -----------------------------------------------------------


def test_token_permutation_inverse():
    sel = np.array([1, 0, 1, 2, 0])
    perm = TokenPermutation.from_selection(sel, 3)
    assert np.array_equal(perm.forward[perm.inverse], np.arange(5))
    assert perm.group_sizes == [2, 2, 1]


def test_single_expert_applies_to_all_in_order(rng):
    bank = init_expert_bank(1, 2, 4, rng)
    x = Tensor(rng.normal((2, 3, 4)))
    decision = RoutingDecision(
        logits=Tensor(np.zeros((6, 1))),
        soft_probs=Tensor(np.ones((6, 1))),
        selected=np.zeros(6, dtype=np.int64),
    )
    out = dispatch_and_reassemble(x, decision, bank, lambda ad, seg: seg * 2.0)
    assert_allclose(out.data, x.data * 2.0, tol=0.0)


def test_identity_experts_roundtrip_bit_exact(rng):
    bank = init_expert_bank(3, 2, 4, rng)
    x = Tensor(rng.normal((2, 5, 4)))
    sel = Rng(5).integers(3, (10,))
    decision = RoutingDecision(
        logits=Tensor(np.zeros((10, 3))),
        soft_probs=Tensor(np.full((10, 3), 1 / 3)),
        selected=sel,
    )
    out = dispatch_and_reassemble(x, decision, bank, lambda ad, seg: seg)
    assert out.data.tobytes() == x.data.tobytes()


def test_dispatch_matches_hand_scatter_oracle():
    # Expert 0 adds 1, expert 1 doubles; fixed routing on scalar-ish tokens.
    bank = init_expert_bank(2, 1, 2, Rng(0))
    x = np.array([[[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]]])
    sel = np.array([0, 1, 1, 0])
    decision = RoutingDecision(
        logits=Tensor(np.zeros((4, 2))),
        soft_probs=Tensor(np.full((4, 2), 0.5)),
        selected=sel,
    )

    def apply(adapter, seg):
        if adapter is bank.adapters[0]:
            return seg + 1.0
        return seg * 2.0

    out = dispatch_and_reassemble(Tensor(x), decision, bank, apply).data
    expected = np.array([[[2.0, 11.0], [4.0, 40.0], [6.0, 60.0], [5.0, 41.0]]])
    assert_allclose(out, expected, tol=0.0)


def test_dispatch_rejects_wrong_coverage(rng):
    bank = init_expert_bank(2, 1, 4, rng)
    x = Tensor(rng.normal((1, 3, 4)))
    decision = RoutingDecision(
        logits=Tensor(np.zeros((2, 2))),
        soft_probs=Tensor(np.full((2, 2), 0.5)),
        selected=np.zeros(2, dtype=np.int64),
    )
    with pytest.raises(Exception):
        dispatch_and_reassemble(x, decision, bank, lambda ad, seg: seg)


# -- balance loss ------------------------------------------------------------------------


def test_balance_loss_uniform_is_exactly_one():
    m, t = 4, 8
    soft = Tensor(np.full((t, m), 1.0 / m))
    selected = np.arange(t) % m
    assert balance_loss(soft, selected).item() == pytest.approx(1.0, abs=0.0)


def test_balance_loss_collapse_is_m():
    m, t = 5, 10
    soft = np.zeros((t, m))
    soft[:, 2] = 1.0
    selected = np.full(t, 2)
    assert balance_loss(Tensor(soft), selected).item() == pytest.approx(float(m), abs=0.0)


def test_balance_loss_matches_formula_oracle(rng):
    m, t = 5, 20
    logits = rng.normal((t, m))
    soft = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    selected = np.argmax(logits, axis=1)
    f = np.bincount(selected, minlength=m) / t
    expected = m * float((f * soft.mean(axis=0)).sum())
    assert balance_loss(Tensor(soft), selected).item() == pytest.approx(expected, abs=1e-12)


def test_minimizing_balance_loss_flattens_usage(rng):
    # Deterministic argmax selection, no exploration noise: only the loss
    # gradient (through the mean soft probabilities) equalizes usage.
    d, m, t = 8, 5, 256
    gate = init_gate(d, m, rng.spawn(1))
    x = Tensor(rng.spawn(2).normal((t, d)))
    opt = AdamW(gate.parameters(), lr=1e-2)
    max_freq = 1.0
    for step in range(2000):
        logits = gate.logits(x)
        decision = gumbel_select(logits, 1.0, None, training=False)
        loss = balance_loss(decision.soft_probs, decision.selected)
        opt.zero_grad()
        backward(loss)
        opt.step()
        max_freq = expert_usage(decision.selected, m).max()
        if max_freq < 1.0 / m + 0.05:
            break
    assert max_freq < 1.0 / m + 0.05


def test_expert_usage_counts():
    usage = expert_usage(np.array([0, 0, 1, 2]), 4)
    assert_allclose(usage, [0.5, 0.25, 0.25, 0.0])
