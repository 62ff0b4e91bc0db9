"""Joint-attention block against brute-force and straight-line oracles."""

import math

import numpy as np
import pytest
from scipy.special import erf

from recmoe import Rng, ShapeError, Tensor
from recmoe.mmdit import (
    attention_weights,
    block_forward,
    empty_context,
    init_block_params,
    joint_attention,
    modulate,
    modulation,
)
from recmoe.tensor import layernorm

from conftest import assert_allclose


def _np_ln(v, eps=1e-6):
    mu = v.mean(axis=-1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps)


def _np_gelu(v):
    return 0.5 * v * (1.0 + erf(v / math.sqrt(2.0)))


# -- modulate -------------------------------------------------------------------


def test_modulate_unit_scale_zero_shift_is_layernorm(rng):
    x = Tensor(rng.normal((4, 6)))
    out = modulate(x, Tensor(np.ones(6)), Tensor(np.zeros(6)))
    assert np.array_equal(out.data, layernorm(x).data)


def test_modulate_zero_scale_gives_constant_rows(rng):
    x = Tensor(rng.normal((5, 6)))
    shift = rng.normal((6,))
    out = modulate(x, Tensor(np.zeros(6)), Tensor(shift)).data
    for row in out:
        assert_allclose(row, shift)


def test_modulate_matches_composition_oracle(rng):
    x = rng.normal((3, 8))
    scale, shift = rng.normal((8,)), rng.normal((8,))
    expected = scale * _np_ln(x) + shift
    out = modulate(Tensor(x), Tensor(scale), Tensor(shift)).data
    assert_allclose(out, expected, tol=1e-12)


def test_modulate_shape_mismatch():
    with pytest.raises(ShapeError):
        modulate(Tensor(np.zeros((2, 4))), Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# -- joint attention --------------------------------------------------------------


def _identity_block(d, heads=1):
    blk = init_block_params(d, heads, Rng(0))
    eye = np.eye(d)
    for name in ("w_q_x", "w_k_x", "w_v_x", "w_q_c", "w_k_c", "w_v_c", "w_o"):
        getattr(blk, name).data = eye.copy()
    return blk


def test_single_token_identity_weights_passthrough(rng):
    d = 4
    blk = _identity_block(d)
    x = Tensor(rng.normal((1, d)))
    a_x, a_c = joint_attention(x, empty_context(d), blk)
    assert_allclose(a_x.data, x.data, tol=1e-12)
    assert a_c.shape == (0, d)


def test_joint_attention_matches_brute_force_oracle():
    d, heads = 2, 1
    blk = init_block_params(d, heads, Rng(3))
    wq = np.array([[0.5, -0.25], [1.0, 0.75]])
    wk = np.array([[-0.3, 0.8], [0.2, 0.1]])
    wv = np.array([[1.5, 0.0], [0.0, -2.0]])
    wo = np.array([[1.0, 0.5], [-0.5, 1.0]])
    blk.w_q_x.data, blk.w_k_x.data, blk.w_v_x.data, blk.w_o.data = wq, wk, wv, wo
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / math.sqrt(d)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    expected = (weights @ v) @ wo

    a_x, _ = joint_attention(Tensor(x), empty_context(d), blk)
    assert_allclose(a_x.data, expected, tol=1e-12)


def test_attention_weight_rows_sum_to_one(rng):
    d, heads = 8, 2
    blk = init_block_params(d, heads, rng.spawn(1))
    x = Tensor(rng.normal((1, 5, d)))
    c = Tensor(rng.normal((1, 3, d)))
    q = Tensor(np.concatenate([x.data @ blk.w_q_x.data, c.data @ blk.w_q_c.data], axis=1))
    k = Tensor(np.concatenate([x.data @ blk.w_k_x.data, c.data @ blk.w_k_c.data], axis=1))
    weights = attention_weights(q, k, heads)
    assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-12


def test_joint_attention_width_mismatch():
    blk = init_block_params(4, 1, Rng(0))
    with pytest.raises(ShapeError):
        joint_attention(Tensor(np.zeros((2, 3))), empty_context(4), blk)


# -- full block --------------------------------------------------------------------


def test_block_is_identity_with_zero_gates(rng):
    # Fresh init has gamma = zeta = 0, so both residual branches are off.
    d = 8
    blk = init_block_params(d, 2, rng.spawn(2))
    x = Tensor(rng.normal((3, d)))
    c = Tensor(rng.normal((2, d)))
    y = Tensor(rng.normal((d,)))
    xo, co = block_forward(x, c, y, blk)
    assert np.array_equal(xo.data, x.data)
    assert np.array_equal(co.data, c.data)


def test_zeroed_mlp_path_contributes_nothing(rng):
    d = 6
    blk = init_block_params(d, 2, rng.spawn(3))
    # Attention path live, but delta/eps/zeta zero: the MLP residual vanishes.
    blk.mod_w.data = np.zeros_like(blk.mod_w.data)
    bias = np.zeros(12 * d)
    bias[0:d] = 1.0  # alpha_x
    bias[2 * d : 3 * d] = 0.7  # gamma_x on, attention path live
    bias[6 * d : 7 * d] = 1.0  # alpha_c
    bias[8 * d : 9 * d] = 0.7  # gamma_c
    # delta, eps, zeta stay zero for both modalities
    blk.mod_b.data = bias
    x = Tensor(rng.normal((3, d)))
    c = Tensor(rng.normal((2, d)))
    y = Tensor(rng.normal((d,)))
    xo, co = block_forward(x, c, y, blk)

    mod = modulation(blk, y)
    from recmoe.mmdit import attention_part

    x1, c1 = attention_part(x, c, mod, blk)
    assert_allclose(xo.data, x1.data, tol=0.0)
    assert_allclose(co.data, c1.data, tol=0.0)


def test_block_matches_straight_line_oracle(rng):
    d, heads = 8, 2
    blk = init_block_params(d, heads, rng.spawn(4))
    blk.mod_w.data = rng.spawn(5).normal((d, 12 * d), std=0.3)
    blk.mod_b.data = rng.spawn(6).normal((12 * d,), std=0.3)
    x = rng.spawn(7).normal((3, d))
    c = rng.spawn(8).normal((2, d))
    y = rng.spawn(9).normal((d,))

    # Independent straight-line evaluation.
    mod = y @ blk.mod_w.data + blk.mod_b.data
    pieces = [mod[i * d : (i + 1) * d] for i in range(12)]
    (ax_, bx_, gx_, dx_, ex_, zx_, ac_, bc_, gc_, dc_, ec_, zc_) = pieces

    def mha(q, k, v):
        hd = d // heads
        nq, nk = q.shape[0], k.shape[0]
        out = np.zeros((nq, d))
        for h in range(heads):
            qh = q[:, h * hd : (h + 1) * hd]
            kh = k[:, h * hd : (h + 1) * hd]
            vh = v[:, h * hd : (h + 1) * hd]
            scores = qh @ kh.T / math.sqrt(hd)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            out[:, h * hd : (h + 1) * hd] = w @ vh
        return out

    xt = ax_ * _np_ln(x) + bx_
    ct = ac_ * _np_ln(c) + bc_
    q = np.concatenate([xt @ blk.w_q_x.data, ct @ blk.w_q_c.data], axis=0)
    k = np.concatenate([xt @ blk.w_k_x.data, ct @ blk.w_k_c.data], axis=0)
    v = np.concatenate([xt @ blk.w_v_x.data, ct @ blk.w_v_c.data], axis=0)
    attn = mha(q, k, v) @ blk.w_o.data
    x1 = x + gx_ * attn[:3]
    c1 = c + gc_ * attn[3:]

    def mlp(v):
        h = _np_gelu(v @ blk.mlp_w1.data + blk.mlp_b1.data)
        return h @ blk.mlp_w2.data + blk.mlp_b2.data

    x2 = x1 + zx_ * mlp(dx_ * _np_ln(x1) + ex_)
    c2 = c1 + zc_ * mlp(dc_ * _np_ln(c1) + ec_)

    xo, co = block_forward(Tensor(x), Tensor(c), Tensor(y), blk)
    assert_allclose(xo.data, x2, tol=1e-10)
    assert_allclose(co.data, c2, tol=1e-10)


# -- invariants --------------------------------------------------------------------


def test_attention_is_permutation_equivariant(rng):
    d = 8
    blk = init_block_params(d, 2, rng.spawn(10))
    x = rng.spawn(11).normal((5, d))
    c = rng.spawn(12).normal((2, d))
    perm = Rng(99).permutation(5)
    a_x, a_c = joint_attention(Tensor(x), Tensor(c), blk)
    p_x, p_c = joint_attention(Tensor(x[perm]), Tensor(c), blk)
    assert_allclose(p_x.data, a_x.data[perm], tol=1e-12)
    assert_allclose(p_c.data, a_c.data, tol=1e-12)


def test_text_output_depends_on_vision_tokens(rng):
    d = 8
    blk = init_block_params(d, 2, rng.spawn(13))
    x = rng.spawn(14).normal((4, d))
    c = rng.spawn(15).normal((2, d))
    _, a_c = joint_attention(Tensor(x), Tensor(c), blk)
    _, a_c_zero = joint_attention(Tensor(np.zeros_like(x)), Tensor(c), blk)
    assert np.abs(a_c.data - a_c_zero.data).max() > 1e-6
