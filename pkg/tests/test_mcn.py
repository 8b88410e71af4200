import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcncl import numcore as nc
from mcncl.mcn import (
    MODALITIES,
    McnConfig,
    McnParams,
    ModalState,
    StageParams,
    cross_attention_block,
    mcn_forward,
    mcn_layer,
)
from mcncl.nn import named_parameters
from mcncl.numcore import grad_check, parameter

import oracles


def as_dict(p: StageParams):
    return {
        "w_q": p.w_q.values, "w_k": p.w_k.values, "w_v": p.w_v.values, "w_o": p.w_o.values,
        "g1": p.norm1_gain.values, "b1": p.norm1_bias.values,
        "f1w": p.ffn1.weight.values, "f1b": p.ffn1.bias.values,
        "f2w": p.ffn2.weight.values, "f2b": p.ffn2.bias.values,
        "g2": p.norm2_gain.values, "b2": p.norm2_bias.values,
    }


def random_stage(D, ffn, rng):
    p = StageParams.init(D, ffn, rng)
    for t in (p.norm1_gain, p.norm1_bias, p.norm2_gain, p.norm2_bias, p.ffn1.bias, p.ffn2.bias):
        t.values[...] = rng.standard_normal(t.shape)
    return p


def random_state(U, D, rng):
    return ModalState(*(nc.constant(rng.standard_normal((U, D))) for _ in MODALITIES))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        McnConfig(dim=6, num_heads=4)
    with pytest.raises(ValueError):
        McnConfig(num_layers=-1)
    with pytest.raises(ValueError):
        McnConfig(stream_order={"text": ("text", "audio"), "audio": ("text", "visual"), "visual": ("text", "audio")})
    cfg = McnConfig()
    assert (cfg.dim, cfg.head_dim, cfg.ffn_width) == (256, 64, 1024)


def test_block_rejects_indivisible_heads(rng):
    p = StageParams.init(6, 8, rng)
    with pytest.raises(ValueError):
        cross_attention_block(rng.standard_normal((2, 6)), rng.standard_normal((2, 6)), p, num_heads=4)


def test_single_kv_row_gets_all_weight(rng):
    p = random_stage(4, 8, rng)
    log = []
    q, kv = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    out = cross_attention_block(q, kv, p, num_heads=2, attn_log=log).values
    assert all((a == 1.0).all() for a in log)
    d = as_dict(p)
    mh = np.tile(kv @ d["w_v"], (3, 1)) @ d["w_o"]
    x = oracles.layer_norm_rows(q + mh, d["g1"], d["b1"], 1e-5)
    ff = oracles.dense(oracles.relu(oracles.dense(x, d["f1w"], d["f1b"])), d["f2w"], d["f2b"])
    np.testing.assert_allclose(out, oracles.layer_norm_rows(x + ff, d["g2"], d["b2"], 1e-5), atol=1e-12)


def test_zero_query_weights_give_uniform_attention(rng):
    p = random_stage(4, 8, rng)
    p.w_q.values[...] = 0.0
    log = []
    q, kv = rng.standard_normal((2, 4)), rng.standard_normal((5, 4))
    out = cross_attention_block(q, kv, p, num_heads=2, attn_log=log).values
    for a in log:
        np.testing.assert_allclose(a, np.full((2, 5), 0.2), atol=1e-15)
    d = as_dict(p)
    mh = np.tile((kv @ d["w_v"]).mean(0), (2, 1)) @ d["w_o"]
    x = oracles.layer_norm_rows(q + mh, d["g1"], d["b1"], 1e-5)
    ff = oracles.dense(oracles.relu(oracles.dense(x, d["f1w"], d["f1b"])), d["f2w"], d["f2b"])
    np.testing.assert_allclose(out, oracles.layer_norm_rows(x + ff, d["g2"], d["b2"], 1e-5), atol=1e-12)


@given(seed=st.integers(0, 10**6))
def test_uniform_attention_ignores_kv_row_order(seed):
    r = np.random.default_rng(seed)
    p = random_stage(4, 8, r)
    p.w_q.values[...] = 0.0
    q, kv = r.standard_normal((3, 4)), r.standard_normal((6, 4))
    a = cross_attention_block(q, kv, p, 2).values
    b = cross_attention_block(q, kv[r.permutation(6)], p, 2).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_hand_chosen_two_by_two_case():
    p = StageParams.zeros(2, 3)
    p.w_q.values[...] = [[1.0, 0.5], [-0.5, 2.0]]
    p.w_k.values[...] = [[0.3, -1.0], [1.0, 0.2]]
    p.w_v.values[...] = [[2.0, 0.0], [0.0, -1.0]]
    p.w_o.values[...] = [[1.0, 1.0], [0.0, 1.0]]
    p.ffn1.weight.values[...] = [[1.0, -1.0, 0.5], [0.0, 1.0, -0.5]]
    p.ffn2.weight.values[...] = [[1.0, 0.0], [0.5, 0.5], [0.0, -1.0]]
    p.norm1_gain.values[...] = [1.5, 0.5]
    p.norm2_bias.values[...] = [0.1, -0.1]
    q = np.array([[1.0, -2.0], [0.5, 0.25]])
    kv = np.array([[0.0, 1.0], [-1.0, 3.0]])
    got = cross_attention_block(q, kv, p, num_heads=1).values
    np.testing.assert_allclose(got, oracles.attention_block(q, kv, as_dict(p), 1), atol=1e-12)


@given(seed=st.integers(0, 10**6), U=st.integers(1, 5), heads=st.sampled_from([1, 2, 4]))
def test_block_matches_brute_force_oracle(seed, U, heads):
    r = np.random.default_rng(seed)
    p = random_stage(4, 6, r)
    q, kv = r.standard_normal((U, 4)), r.standard_normal((U + 1, 4))
    log = []
    got = cross_attention_block(q, kv, p, heads, attn_log=log).values
    np.testing.assert_allclose(got, oracles.attention_block(q, kv, as_dict(p), heads), atol=1e-12)
    for a in log:
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_block_mask_keeps_rows_inside_their_group(rng):
    p = random_stage(4, 6, rng)
    groups = np.array([0, 0, 1, 1, 1])
    mask = groups[:, None] == groups[None, :]
    q, kv = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    got = cross_attention_block(q, kv, p, 2, mask=mask).values
    np.testing.assert_allclose(got, oracles.attention_block(q, kv, as_dict(p), 2, mask=mask), atol=1e-12)
    for g in (0, 1):
        rows = groups == g
        alone = cross_attention_block(q[rows], kv[rows], p, 2).values
        np.testing.assert_allclose(got[rows], alone, atol=1e-12)


def test_zero_weights_layer_is_double_norm(rng):
    cfg = McnConfig(dim=4, num_heads=2, num_layers=1, ffn_dim=8)
    layer = {m: [StageParams.zeros(4, 8), StageParams.zeros(4, 8)] for m in MODALITIES}
    state = random_state(3, 4, rng)
    out = mcn_layer(state, layer, cfg)
    one, zero = np.ones(4), np.zeros(4)
    for m in MODALITIES:
        ln = lambda v: oracles.layer_norm_rows(v, one, zero, 1e-5)  # noqa: E731
        # two stages, each normalising twice (after attention and after the feed-forward)
        np.testing.assert_allclose(out[m].values, ln(ln(ln(ln(state[m].values)))), atol=1e-12)


def test_layer_matches_composed_blocks(rng):
    cfg = McnConfig(dim=4, num_heads=2, num_layers=1, ffn_dim=6)
    layer = {m: [random_stage(4, 6, rng), random_stage(4, 6, rng)] for m in MODALITIES}
    state = random_state(2, 4, rng)
    out = mcn_layer(state, layer, cfg)
    raw = {m: state[m].values for m in MODALITIES}
    for m, (a, b) in {"text": ("audio", "visual"), "audio": ("text", "visual"), "visual": ("text", "audio")}.items():
        x = oracles.attention_block(raw[m], raw[a], as_dict(layer[m][0]), 2)
        want = oracles.attention_block(x, raw[b], as_dict(layer[m][1]), 2)
        np.testing.assert_allclose(out[m].values, want, atol=1e-10)


def test_stream_order_is_configurable(rng):
    order = {"text": ("visual", "audio"), "audio": ("visual", "text"), "visual": ("audio", "text")}
    cfg = McnConfig(dim=4, num_heads=2, num_layers=1, ffn_dim=6, stream_order=order)
    layer = {m: [random_stage(4, 6, rng), random_stage(4, 6, rng)] for m in MODALITIES}
    state = random_state(2, 4, rng)
    out = mcn_layer(state, layer, cfg)
    x = oracles.attention_block(state.text.values, state.visual.values, as_dict(layer["text"][0]), 2)
    want = oracles.attention_block(x, state.audio.values, as_dict(layer["text"][1]), 2)
    np.testing.assert_allclose(out.text.values, want, atol=1e-10)


def test_zero_layers_is_identity(rng):
    cfg = McnConfig(dim=4, num_heads=2, num_layers=0)
    state = random_state(3, 4, rng)
    out = mcn_forward(state, McnParams.init(cfg, rng), cfg)
    for m in MODALITIES:
        assert out[m] is state[m]


def test_two_layers_compose(rng):
    cfg = McnConfig(dim=4, num_heads=2, num_layers=2, ffn_dim=6)
    params = McnParams.init(cfg, rng)
    state = random_state(3, 4, rng)
    out = mcn_forward(state, params, cfg)
    twice = mcn_layer(mcn_layer(state, params.layers[0], cfg), params.layers[1], cfg)
    for m in MODALITIES:
        np.testing.assert_array_equal(out[m].values, twice[m].values)
    with pytest.raises(ValueError):
        mcn_forward(state, params, McnConfig(dim=4, num_heads=2, num_layers=1))


@given(U=st.integers(1, 4), T=st.integers(0, 2), seed=st.integers(0, 10**6))
def test_output_shape_any_depth(U, T, seed):
    r = np.random.default_rng(seed)
    cfg = McnConfig(dim=4, num_heads=2, num_layers=T, ffn_dim=4)
    out = mcn_forward(random_state(U, 4, r), McnParams.init(cfg, r), cfg)
    assert all(out[m].shape == (U, 4) for m in MODALITIES)


def test_full_width_shapes():
    rng = np.random.default_rng(1)
    cfg = McnConfig(num_layers=1)
    out = mcn_forward(random_state(3, 256, rng), McnParams.init(cfg, rng), cfg)
    assert all(out[m].shape == (3, 256) for m in MODALITIES)


def test_mismatched_streams_rejected(rng):
    with pytest.raises(nc.ShapeError):
        ModalState(nc.constant(np.zeros((2, 4))), nc.constant(np.zeros((3, 4))), nc.constant(np.zeros((2, 4))))


def test_grad_check_one_layer(rng):
    cfg = McnConfig(dim=4, num_heads=2, num_layers=1)
    params = McnParams.init(cfg, rng)
    named = named_parameters(params, "mcn")
    inputs = {m: parameter(rng.standard_normal((2, 4)), m) for m in MODALITIES}
    named.update(inputs)
    w = rng.standard_normal((2, 4))

    def loss():
        out = mcn_forward(ModalState(**inputs), params, cfg)
        return nc.sum_all(nc.mul(nc.add(nc.add(out.text, out.audio), nc.scale(out.visual, 0.5)), nc.constant(w)))

    assert grad_check(loss, named) < 1e-4
