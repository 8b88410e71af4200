import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcncl import numcore as nc
from mcncl.nn import named_parameters
from mcncl.numcore import grad_check, parameter
from mcncl.psa import (
    ClipLayout,
    PsaConfig,
    PsaParams,
    mean_pool_batch,
    multi_scale_conv,
    psa_forward,
    psa_pool_batch,
    se_weight,
    temporal_pool,
)

import oracles


def make_params(C, S, rng, reduction=2):
    return PsaParams.init(PsaConfig(C, S, reduction), rng)


def zero_se(params):
    for aff in (params.se_fc1, params.se_fc2):
        aff.weight.values[...] = 0.0
        aff.bias.values[...] = 0.0


def test_kernel_sizes_and_groups():
    cfg = PsaConfig()
    assert cfg.kernel_sizes == [3, 5, 7, 9]
    assert cfg.group_width == 64
    assert cfg.se_hidden == 64
    params = PsaParams.init(cfg, np.random.default_rng(0))
    assert [k.shape for k in params.branch_kernels] == [(k, 64, 64) for k in (3, 5, 7, 9)]


@pytest.mark.parametrize("kw", [dict(channels=10, num_branches=4), dict(channels=8, se_reduction=3), dict(pooling="max")])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        PsaConfig(**{"channels": 8, **kw})


def test_delta_kernels_are_identity(rng):
    params = make_params(8, 4, rng)
    for kern, b in zip(params.branch_kernels, params.branch_biases):
        kern.values[...] = 0.0
        kern.values[kern.shape[0] // 2] = np.eye(kern.shape[1])
        b.values[...] = 0.0
    X = rng.standard_normal((5, 8))
    np.testing.assert_array_equal(multi_scale_conv(X, params).values, X)


def test_all_ones_two_branches_hand_values(rng):
    params = make_params(2, 2, rng, reduction=1)
    for kern, b in zip(params.branch_kernels, params.branch_biases):
        kern.values[...] = 1.0
        b.values[...] = 0.0
    Y = multi_scale_conv(np.ones((4, 2)), params).values
    assert Y[:, 0].tolist() == [2.0, 3.0, 3.0, 2.0]
    assert Y[:, 1].tolist() == [3.0, 4.0, 4.0, 3.0]


def test_se_zero_params_gives_half(rng):
    params = make_params(8, 4, rng)
    zero_se(params)
    np.testing.assert_array_equal(se_weight(rng.standard_normal((3, 8)), params).values, np.full(8, 0.5))


def test_se_constant_input_squeezes_to_that_row(rng):
    params = make_params(8, 4, rng)
    row = rng.standard_normal(8)
    Y = np.tile(row, (4, 1))
    expected = oracles.sigmoid(
        oracles.dense(oracles.relu(oracles.dense(row[None], params.se_fc1.weight.values, params.se_fc1.bias.values)),
                      params.se_fc2.weight.values, params.se_fc2.bias.values)
    )[0]
    np.testing.assert_allclose(se_weight(Y, params).values, expected, atol=1e-12)


def _oracle_psa(X, params):
    Y = oracles.conv_grouped(X, [k.values for k in params.branch_kernels], [b.values for b in params.branch_biases])
    Z = Y.mean(axis=0, keepdims=True)
    h = oracles.relu(oracles.dense(Z, params.se_fc1.weight.values, params.se_fc1.bias.values))
    W = oracles.sigmoid(oracles.dense(h, params.se_fc2.weight.values, params.se_fc2.bias.values))[0]
    return Y, W, Y * W


def test_se_and_forward_match_composed_oracle(rng):
    params = make_params(8, 4, rng)
    for b in params.branch_biases:
        b.values[...] = rng.standard_normal(b.shape)
    X = rng.standard_normal((7, 8))
    Y, W, out = _oracle_psa(X, params)
    np.testing.assert_allclose(se_weight(Y, params).values, W, atol=1e-12)
    np.testing.assert_allclose(psa_forward(X, params).values, out, atol=1e-12)


def test_saturated_and_half_gates(rng):
    params = make_params(8, 4, rng)
    X = rng.standard_normal((5, 8))
    Y = multi_scale_conv(X, params).values
    zero_se(params)
    np.testing.assert_allclose(psa_forward(X, params).values, Y / 2, atol=1e-15)
    params.se_fc2.bias.values[...] = 100.0
    np.testing.assert_array_equal(psa_forward(X, params).values, Y)


def test_temporal_pool(rng):
    f = rng.standard_normal((1, 4))
    np.testing.assert_array_equal(temporal_pool(f).values, f[0])
    two = np.stack([np.zeros(3), np.full(3, 2.0)])
    np.testing.assert_array_equal(temporal_pool(two).values, np.ones(3))
    five = rng.standard_normal((5, 6))
    naive = np.array([sum(five[t, c] for t in range(5)) / 5 for c in range(6)])
    np.testing.assert_allclose(temporal_pool(five).values, naive, atol=1e-15)
    with pytest.raises(ValueError):
        temporal_pool(np.zeros((0, 3)))


@given(L=st.integers(1, 12), S=st.sampled_from([1, 2, 4]), width=st.integers(1, 3), seed=st.integers(0, 10**6))
def test_shape_preserved_and_gate_in_open_interval(L, S, width, seed):
    r = np.random.default_rng(seed)
    params = make_params(S * width, S, r, reduction=1)
    X = r.standard_normal((L, S * width)) * 3
    assert psa_forward(X, params).shape == X.shape
    W = se_weight(multi_scale_conv(X, params), params).values
    assert ((W > 0) & (W < 1)).all()


@given(group=st.integers(0, 3), seed=st.integers(0, 10**6))
def test_perturbing_one_group_only_moves_that_group(group, seed):
    r = np.random.default_rng(seed)
    params = make_params(8, 4, r)
    X = r.standard_normal((6, 8))
    X2 = X.copy()
    X2[:, 2 * group : 2 * group + 2] += r.standard_normal((6, 2))
    diff = np.abs(multi_scale_conv(X2, params).values - multi_scale_conv(X, params).values).max(axis=0)
    others = np.delete(diff, [2 * group, 2 * group + 1])
    assert (others == 0).all()


def test_grad_check_small_clip(rng):
    params = make_params(8, 4, rng)
    assert [k.shape[0] for k in params.branch_kernels] == [3, 5, 7, 9]
    named = named_parameters(params, "psa")
    X = parameter(rng.standard_normal((6, 8)), "X")
    named["X"] = X
    w = rng.standard_normal((6, 8))
    err = grad_check(lambda: nc.sum_all(nc.mul(psa_forward(X, params), nc.constant(w))), named)
    assert err < 1e-5


@given(lengths=st.lists(st.integers(1, 9), min_size=1, max_size=5), seed=st.integers(0, 10**6))
def test_batched_pooling_equals_per_clip(lengths, seed):
    r = np.random.default_rng(seed)
    params = make_params(8, 4, r)
    clips = [r.standard_normal((n, 8)) for n in lengths]
    layout = ClipLayout.build(lengths, gap=4)
    batched = psa_pool_batch(np.concatenate(clips), layout, params).values
    single = np.stack([temporal_pool(psa_forward(c, params)).values for c in clips])
    np.testing.assert_allclose(batched, single, atol=1e-12)
    means = mean_pool_batch(np.concatenate(clips), layout).values
    np.testing.assert_allclose(means, np.stack([c.mean(0) for c in clips]), atol=1e-14)


def test_narrow_gap_rejected(rng):
    params = make_params(8, 4, rng)
    with pytest.raises(ValueError, match="gap"):
        psa_pool_batch(np.zeros((3, 8)), ClipLayout.build([3], gap=2), params)


def test_wrong_channel_count_rejected(rng):
    with pytest.raises(nc.ShapeError):
        psa_forward(np.zeros((3, 6)), make_params(8, 4, rng))
