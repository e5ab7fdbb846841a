import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import naive_conv2d, numeric_grad, rel_error, to_float64
from rfdamp import ops
from rfdamp.damping import DampingSpec, build_damping_matrix, damped_conv2d, linear_profile
from rfdamp.errors import ConfigError, ShapeError
from rfdamp.layers import ConvLayer
from rfdamp.model import ArchSpec, build, count_params


def _layer(rng, cin=2, cout=3, k=3, bias=True):
    layer = ConvLayer(cin, cout, k, bias=bias)
    layer.weight.data[...] = rng.standard_normal(layer.weight.shape)
    if bias:
        layer.bias.data[...] = rng.standard_normal(cout)
    return layer


def test_frequency_profile_lambda_point_one():
    C = build_damping_matrix(3, 3, DampingSpec(lam=0.1))
    np.testing.assert_allclose(C.values[1], [0.1, 1.0, 0.1], rtol=1e-7)
    # every time row carries the same frequency profile
    np.testing.assert_array_equal(C.values[0], C.values[1])


def test_five_tap_profile():
    np.testing.assert_allclose(linear_profile(5, 0.1), [0.1, 0.55, 1.0, 0.55, 0.1])


def test_lambda_one_is_identity_matrix_of_ones():
    assert np.all(build_damping_matrix(3, 5, DampingSpec(lam=1.0)).values == 1)


def test_time_and_both_axes():
    t = build_damping_matrix(3, 3, DampingSpec(lam=0.2, axis="time")).values
    np.testing.assert_allclose(t[:, 0], [0.2, 1.0, 0.2], rtol=1e-7)
    b = build_damping_matrix(3, 3, DampingSpec(lam=0.2, axis="both")).values
    np.testing.assert_allclose(b, np.outer([0.2, 1, 0.2], [0.2, 1, 0.2]), rtol=1e-7)


def test_disabled_spec_gives_ones():
    assert np.all(build_damping_matrix(3, 3, DampingSpec(enabled=False)).values == 1)


@pytest.mark.parametrize("lam", [0.0, -0.5, 1.5])
def test_lambda_out_of_range(lam):
    with pytest.raises(ConfigError):
        build_damping_matrix(3, 3, DampingSpec(lam=lam))


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        build_damping_matrix(3, 4, DampingSpec())


def test_matrix_is_read_only():
    C = build_damping_matrix(3, 3, DampingSpec())
    with pytest.raises(ValueError):
        C.values[0, 0] = 5


@given(st.sampled_from([1, 3, 5, 7]), st.sampled_from([1, 3, 5, 7]), st.floats(0.01, 1.0))
def test_matrix_properties(kt, kf, lam):
    C = build_damping_matrix(kt, kf, DampingSpec(lam=lam, axis="both")).values
    assert C[kt // 2, kf // 2] == 1
    assert C.min() >= lam * lam - 1e-6 and C.max() <= 1
    np.testing.assert_allclose(C[kt // 2], linear_profile(kf, lam), rtol=1e-6)
    np.testing.assert_allclose(C, C[::-1, ::-1], rtol=1e-6)


def test_lambda_one_bitwise_equals_plain_conv(rng):
    layer = _layer(rng)
    x = rng.standard_normal((2, 2, 7, 6)).astype(np.float32)
    C = build_damping_matrix(3, 3, DampingSpec(lam=1.0))
    plain = ops.conv2d(x, layer.weight.data, layer.bias.data, layer.stride, layer.padding)
    assert np.array_equal(damped_conv2d(x, layer, C), plain)


def test_damped_conv_matches_oracle(rng):
    layer = _layer(rng)
    x = rng.standard_normal((1, 2, 6, 6))
    C = build_damping_matrix(3, 3, DampingSpec(lam=0.1))
    want = naive_conv2d(x, layer.weight.data * C.values, layer.bias.data, (1, 1), (1, 1))
    np.testing.assert_allclose(damped_conv2d(x, layer, C), want, rtol=1e-5, atol=1e-5)


def test_damping_shape_mismatch(rng):
    layer = _layer(rng, k=3)
    with pytest.raises(ShapeError):
        damped_conv2d(np.zeros((1, 2, 4, 4), np.float32), layer, build_damping_matrix(5, 5, DampingSpec()))
    with pytest.raises(ConfigError):
        layer.set_damping(build_damping_matrix(1, 1, DampingSpec()))


def test_stored_weight_stays_undamped(rng):
    layer = _layer(rng)
    w = layer.weight.data.copy()
    layer.set_damping(build_damping_matrix(3, 3, DampingSpec(lam=0.1)))
    layer.forward(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(layer.weight.data, w)


@pytest.mark.parametrize("case", [(2, 2, 3, 6, 5, 3), (1, 3, 2, 5, 7, 5), (2, 1, 1, 4, 4, 3)])
def test_damped_conv_gradients(case, rng):
    n, cin, cout, t, f, k = case
    layer = _layer(rng, cin, cout, k)
    layer.set_damping(build_damping_matrix(k, k, DampingSpec(lam=0.1, axis="both")))
    to_float64(layer)
    x = rng.standard_normal((n, cin, t, f))
    r = rng.standard_normal((n, cout, t, f))

    def loss():
        return float((layer.forward(x) * r).sum())

    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(r)
    assert rel_error(gx, numeric_grad(loss, x)) <= 1e-3
    # gradient w.r.t. the stored (undamped) weight carries the extra factor C
    assert rel_error(layer.weight.grad, numeric_grad(loss, layer.weight.data)) <= 1e-3
    assert rel_error(layer.bias.grad, numeric_grad(loss, layer.bias.data)) <= 1e-3


def test_parameter_count_unchanged_by_damping():
    for rho in (3, 7, 12):
        plain = count_params(ArchSpec(base_channels=16, rho=rho))
        damped = count_params(ArchSpec(base_channels=16, rho=rho, damping=DampingSpec(enabled=True)))
        assert plain == damped


def test_network_damps_every_spatial_conv():
    net = build(ArchSpec(base_channels=4, rho=3, damping=DampingSpec(enabled=True)), seed=0)
    for name, m in net.named_modules():
        if isinstance(m, ConvLayer):
            assert (m.damping is not None) == (m.kernel != (1, 1)), name


def test_closed_form_sum_of_damping_matrix():
    layer = ConvLayer(1, 1, 3, padding=0, bias=False)
    layer.weight.data[...] = 1
    C = build_damping_matrix(3, 3, DampingSpec(lam=0.1))
    out = damped_conv2d(np.ones((1, 1, 3, 3), np.float32), layer, C)
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == pytest.approx(3.6, rel=1e-6)


def test_damped_conv_bitwise_equals_conv_of_product(rng):
    layer = _layer(rng)
    x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    C = build_damping_matrix(3, 3, DampingSpec(lam=0.3))
    want = ops.conv2d(x, layer.weight.data * C.values, layer.bias.data, layer.stride, layer.padding)
    assert np.array_equal(damped_conv2d(x, layer, C), want)
