import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hafformer import analysis, mixers
from hafformer.mixers import (
    ALL_MIXER_COMBOS,
    BlockParams,
    ChannelMixerKind,
    TokenMixerKind,
    afformer_block,
    channel_mix,
    channel_param_shapes,
    param_count,
    random_block_params,
    token_mix,
    token_param_shapes,
)
from hafformer.tensor import Tensor, grad_check, layer_norm, sum_all

from oracle_forward import ref_attention


def zero_block_params(tk, ck, d):
    return BlockParams(
        token={n: Tensor(np.zeros(s)) for n, s in token_param_shapes(tk, d).items()},
        channel={n: Tensor(np.zeros(s)) for n, s in channel_param_shapes(ck, d).items()},
        token_gamma=Tensor(np.ones(d)),
        token_beta=Tensor(np.zeros(d)),
        channel_gamma=Tensor(np.ones(d)),
        channel_beta=Tensor(np.zeros(d)),
    )


def unit_norms(d):
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


# ---------------------------------------------------------------------------
# token mixers


def test_msdw_zero_weights_is_identity(rng):
    x = rng.standard_normal((12, 8))
    params = {n: Tensor(np.zeros(s)) for n, s in token_param_shapes(TokenMixerKind.MSDW, 8).items()}
    gamma, beta = unit_norms(8)
    out = token_mix(TokenMixerKind.MSDW, params, gamma, beta, Tensor(x))
    assert np.array_equal(out.value, x)


def test_pool_token_mixer_on_time_constant_input(rng):
    # one value per channel, constant over time: pooling preserves the
    # normalized rows exactly, so Y = LN(X) + X
    row = rng.standard_normal(8)
    x = np.tile(row, (10, 1))
    gamma, beta = unit_norms(8)
    out = token_mix(TokenMixerKind.POOL, {}, gamma, beta, Tensor(x))
    ln = layer_norm(Tensor(x), gamma, beta).value
    assert out.value == pytest.approx(x + ln, abs=1e-12)


def test_pool_token_mixer_constant_matrix_is_identity():
    x = np.full((9, 8), 3.25)
    gamma, beta = unit_norms(8)
    out = token_mix(TokenMixerKind.POOL, {}, gamma, beta, Tensor(x))
    assert out.value == pytest.approx(x, abs=1e-12)


def test_self_attention_matches_loop_oracle(rng):
    d = 8
    shapes = token_param_shapes(TokenMixerKind.SELF_ATTENTION, d)
    params = {n: Tensor(rng.standard_normal(s)) for n, s in shapes.items()}
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(d))
    beta = Tensor(0.1 * rng.standard_normal(d))
    x = rng.standard_normal((4, d))
    out = token_mix(TokenMixerKind.SELF_ATTENTION, params, gamma, beta, Tensor(x))
    z = layer_norm(Tensor(x), gamma, beta).value
    expect = ref_attention(z, {n: t.value for n, t in params.items()}) + x
    assert np.max(np.abs(out.value - expect)) < 1e-10


# ---------------------------------------------------------------------------
# channel mixers


def test_geglu_zero_gate_is_identity(rng):
    d = 8
    shapes = channel_param_shapes(ChannelMixerKind.GEGLU, d)
    params = {n: Tensor(rng.standard_normal(s)) for n, s in shapes.items()}
    params["w1"] = Tensor(np.zeros(shapes["w1"]))
    params["b1"] = Tensor(np.zeros(shapes["b1"]))
    params["b3"] = Tensor(np.zeros(shapes["b3"]))
    gamma, beta = unit_norms(d)
    x = rng.standard_normal((5, d))
    out = channel_mix(ChannelMixerKind.GEGLU, params, gamma, beta, Tensor(x))
    assert np.array_equal(out.value, x)


def test_ffn_zero_weights_is_identity(rng):
    d = 8
    params = {n: Tensor(np.zeros(s)) for n, s in channel_param_shapes(ChannelMixerKind.FFN, d).items()}
    gamma, beta = unit_norms(d)
    x = rng.standard_normal((5, d))
    out = channel_mix(ChannelMixerKind.FFN, params, gamma, beta, Tensor(x))
    assert np.array_equal(out.value, x)


def loop_gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def test_geglu_matches_elementwise_loop_oracle(rng):
    d = 8
    shapes = channel_param_shapes(ChannelMixerKind.GEGLU, d)
    params = {n: Tensor(rng.standard_normal(s)) for n, s in shapes.items()}
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(d))
    beta = Tensor(0.1 * rng.standard_normal(d))
    x = rng.standard_normal((2, d))
    out = channel_mix(ChannelMixerKind.GEGLU, params, gamma, beta, Tensor(x))

    p = {n: t.value for n, t in params.items()}
    z = layer_norm(Tensor(x), gamma, beta).value
    hidden = p["w1"].shape[1]
    expect = np.zeros_like(x)
    for i in range(2):
        gate = [
            loop_gelu(sum(z[i, a] * p["w1"][a, j] for a in range(d)) + p["b1"][j])
            for j in range(hidden)
        ]
        val = [
            sum(z[i, a] * p["w2"][a, j] for a in range(d)) + p["b2"][j]
            for j in range(hidden)
        ]
        prod = [gate[j] * val[j] for j in range(hidden)]
        for c in range(d):
            expect[i, c] = sum(prod[j] * p["w3"][j, c] for j in range(hidden)) + p["b3"][c] + x[i, c]
    assert np.max(np.abs(out.value - expect)) < 1e-10


def test_channel_residual_flag(rng):
    d = 8
    params = {n: Tensor(np.zeros(s)) for n, s in channel_param_shapes(ChannelMixerKind.FFN, d).items()}
    gamma, beta = unit_norms(d)
    x = rng.standard_normal((5, d))
    out = channel_mix(ChannelMixerKind.FFN, params, gamma, beta, Tensor(x), residual=False)
    assert out.value == pytest.approx(np.zeros((5, d)))


# ---------------------------------------------------------------------------
# composed block


def test_identity_identity_block_on_constant_rows():
    x = np.tile(np.array([[4.0]]), (6, 8))  # constant rows normalize to zero
    bp = zero_block_params(TokenMixerKind.IDENTITY, ChannelMixerKind.IDENTITY, 8)
    out = afformer_block(TokenMixerKind.IDENTITY, ChannelMixerKind.IDENTITY, bp, Tensor(x))
    assert out.value == pytest.approx(x, abs=1e-12)


@pytest.mark.parametrize("tk,ck", ALL_MIXER_COMBOS)
def test_zero_parameter_block_is_exact_identity(tk, ck, rng):
    """Every mixer whose output path is linear in some zeroed tensor
    collapses to the residual; Pool/Identity need constant rows instead."""
    d = 8
    bp = zero_block_params(tk, ck, d)
    if tk == TokenMixerKind.POOL or tk == TokenMixerKind.IDENTITY or ck in (
        ChannelMixerKind.POOL,
        ChannelMixerKind.IDENTITY,
    ):
        x = np.full((10, d), 2.5)  # rows normalize to exactly zero
        out = afformer_block(tk, ck, bp, Tensor(x))
        assert out.value == pytest.approx(x, abs=1e-12)
    else:
        x = rng.standard_normal((10, d))
        out = afformer_block(tk, ck, bp, Tensor(x))
        assert np.array_equal(out.value, x)


@settings(max_examples=15, deadline=None)
@given(frames=st.integers(1, 33), seed=st.integers(0, 2**31))
def test_shape_preservation_all_combos(frames, seed):
    rng = np.random.default_rng(seed)
    d = 8
    x = Tensor(rng.standard_normal((frames, d)), requires_grad=False)
    import warnings as w

    for tk, ck in ALL_MIXER_COMBOS:
        bp = random_block_params(tk, ck, d, rng)
        with w.catch_warnings():
            w.simplefilter("ignore", RuntimeWarning)
            out = afformer_block(tk, ck, bp, x)
        assert out.value.shape == (frames, d)


def test_short_sequence_warning(rng):
    bp = random_block_params(TokenMixerKind.MSDW, ChannelMixerKind.IDENTITY, 8, rng)
    x = Tensor(rng.standard_normal((4, 8)), requires_grad=False)
    with pytest.warns(RuntimeWarning, match="depthwise kernel"):
        afformer_block(TokenMixerKind.MSDW, ChannelMixerKind.IDENTITY, bp, x)


@pytest.mark.parametrize("tk,ck", ALL_MIXER_COMBOS)
def test_block_gradients_all_combos(tk, ck):
    rng = np.random.default_rng(hash((tk.value, ck.value)) % 2**31)
    bp = random_block_params(tk, ck, 8, rng)
    x = Tensor(rng.standard_normal((16, 8)), requires_grad=False)

    def f():
        return sum_all(afformer_block(tk, ck, bp, x))

    assert grad_check(f, bp.tensors()) < 1e-4


# ---------------------------------------------------------------------------
# parameter accounting parity


@pytest.mark.parametrize("kind", list(TokenMixerKind))
def test_token_param_layout_matches_closed_form(kind):
    for d in (4, 8, 16):
        assert param_count(token_param_shapes(kind, d)) == analysis.token_mixer_param_count(kind, d)


@pytest.mark.parametrize("kind", list(ChannelMixerKind))
def test_channel_param_layout_matches_closed_form(kind):
    for d in (4, 8, 16):
        assert param_count(channel_param_shapes(kind, d)) == analysis.channel_mixer_param_count(kind, d)


def test_pool_and_identity_mixers_have_no_parameters():
    for kind in (TokenMixerKind.POOL, TokenMixerKind.IDENTITY):
        assert token_param_shapes(kind, 8) == {}
        assert analysis.token_mixer_param_count(kind, 8) == 0
        assert analysis.token_mixer_macs(kind, 8, 800) == 0
    for kind in (ChannelMixerKind.POOL, ChannelMixerKind.IDENTITY):
        assert channel_param_shapes(kind, 8) == {}
        assert analysis.channel_mixer_param_count(kind, 8) == 0
        assert analysis.channel_mixer_macs(kind, 8, 800) == 0


def test_per_block_costs_at_reference_width():
    d = 8
    assert analysis.token_mixer_param_count(TokenMixerKind.SELF_ATTENTION, d) == 288
    assert analysis.token_mixer_param_count(TokenMixerKind.ISC, d) == 368
    assert analysis.token_mixer_param_count(TokenMixerKind.DW, d) == 56
    assert analysis.token_mixer_param_count(TokenMixerKind.MSDW, d) == 64
    assert analysis.channel_mixer_param_count(ChannelMixerKind.FFN, d) == 552
    assert analysis.channel_mixer_param_count(ChannelMixerKind.GEGLU, d) == 424
    # per-frame MAC rates
    assert analysis.token_mixer_macs(TokenMixerKind.ISC, d, 1) == 368
    assert analysis.token_mixer_macs(TokenMixerKind.DW, d, 1) == 56
    assert analysis.token_mixer_macs(TokenMixerKind.MSDW, d, 1) == 64
    assert analysis.channel_mixer_macs(ChannelMixerKind.FFN, d, 1) == 512
    assert analysis.channel_mixer_macs(ChannelMixerKind.GEGLU, d, 1) == 384
    L = 800
    assert analysis.token_mixer_macs(TokenMixerKind.SELF_ATTENTION, d, L) == 4 * L * 64 + 2 * L * L * 8
