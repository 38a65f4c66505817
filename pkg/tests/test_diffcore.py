import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metaseg import diffcore as dc
from metaseg.boxes import Box
from metaseg.errors import BoxError, ConfigError, NumericError, ShapeError, SizeError
from oracles import bilinear_point, naive_conv


# ---------------------------------------------------------------- conv2d

def test_conv_zero_input_gives_bias():
    k = np.random.default_rng(0).normal(size=(1, 1, 2, 2))
    out = dc.conv2d(dc.Tensor(np.zeros((1, 1, 3, 3))), dc.Tensor(k), dc.Tensor([0.7]))
    assert np.all(out.data == 0.7)


def test_conv_scalar_kernel_scales():
    out = dc.conv2d(dc.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), dc.Tensor([[[[2.0]]]]), dc.Tensor([0.0]))
    np.testing.assert_array_equal(out.data[0, 0], [[2, 4], [6, 8]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.normal(size=(2, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(k), dc.Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, naive_conv(x, k, b, stride, pad), atol=1e-12, rtol=0)


def test_conv_spec_shape_case():
    rng = np.random.default_rng(42)
    x, k = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    out = dc.conv2d(dc.Tensor(x), dc.Tensor(k), dc.Tensor(np.zeros(3)))
    assert np.max(np.abs(out.data - naive_conv(x, k, np.zeros(3), 1, 0))) < 1e-12


def test_conv_shape_errors():
    with pytest.raises(SizeError):
        dc.conv2d(dc.Tensor(np.zeros((1, 2, 4, 4))), dc.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(SizeError):
        dc.conv2d(dc.Tensor(np.zeros((1, 1, 2, 2))), dc.Tensor(np.zeros((1, 1, 3, 3))))


def test_nonfinite_input_rejected():
    with pytest.raises(NumericError):
        dc.Tensor([1.0, np.nan])
    x = dc.Tensor(np.ones((1, 1, 2, 2)))
    x.data[0, 0, 0, 0] = np.inf   # bypasses the constructor check
    with pytest.raises(NumericError):
        dc.conv2d(x, dc.Tensor(np.ones((1, 1, 1, 1))))


# ---------------------------------------------------------------- group_norm

def test_group_norm_constant_input():
    x = dc.Tensor(np.full((1, 4, 3, 3), 2.5))
    one, zero = dc.Tensor(np.ones(4)), dc.Tensor(np.zeros(4))
    assert np.all(dc.group_norm(x, 2, one, zero).data == 0.0)
    out = dc.group_norm(x, 2, one, dc.Tensor(np.full(4, 0.3)))
    np.testing.assert_array_equal(out.data, 0.3)


def test_group_norm_hand_formula():
    x = dc.Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2))
    out = dc.group_norm(x, 1, dc.Tensor([1.0]), dc.Tensor([0.0]), eps=1e-5)
    expect = (np.array([1, 2, 3, 4]) - 2.5) / math.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), expect, rtol=0, atol=1e-15)


def test_group_norm_bad_groups():
    with pytest.raises(ConfigError):
        dc.group_norm(dc.Tensor(np.zeros((1, 6, 2, 2))), 4, dc.Tensor(np.ones(6)), dc.Tensor(np.zeros(6)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), groups=st.sampled_from([1, 2, 4]), scale=st.floats(0.5, 20))
def test_group_norm_statistics(seed, groups, scale):
    x = np.random.default_rng(seed).normal(size=(2, 8, 5, 5)) * scale + 3.0
    out = dc.group_norm(dc.Tensor(x), groups, dc.Tensor(np.ones(8)), dc.Tensor(np.zeros(8))).data
    g = out.reshape(2, groups, -1)
    assert np.all(np.abs(g.mean(axis=2)) < 1e-6)
    assert np.all(np.abs(g.var(axis=2) - 1.0) < 1e-4)


def test_group_norm_batch_independent():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4, 4, 4))
    gamma, beta = dc.Tensor(rng.normal(size=4)), dc.Tensor(rng.normal(size=4))
    full = dc.group_norm(dc.Tensor(x), 2, gamma, beta).data
    one = dc.group_norm(dc.Tensor(x[1:2]), 2, gamma, beta).data
    np.testing.assert_array_equal(full[1:2], one)


# ---------------------------------------------------------------- sampling

def test_roi_crop_identity_and_constant():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(2, 6, 6))
    out = dc.roi_crop(dc.Tensor(f), Box.full_frame(6, 6), 6)
    np.testing.assert_allclose(out.data, f, atol=1e-14)
    const = dc.roi_crop(dc.Tensor(np.full((1, 7, 9), 3.25)), Box(3.3, 2.9, 4.1, 2.7), 5)
    np.testing.assert_allclose(const.data, 3.25, atol=1e-14)


def test_roi_crop_ramp_matches_pointwise_oracle():
    ramp = np.arange(16, dtype=float).reshape(4, 4)
    box = Box.from_corners(1, 1, 3, 3)
    out = dc.roi_crop(dc.Tensor(ramp[None]), box, 2).data[0]
    for r in range(2):
        for c in range(2):
            y = 1 + (r + 0.5) * 2 / 2
            x = 1 + (c + 0.5) * 2 / 2
            assert out[r, c] == pytest.approx(bilinear_point(ramp, y, x), abs=1e-14)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), window=st.integers(1, 7))
def test_roi_crop_random_boxes_match_oracle(seed, window):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(9, 11))
    x0, y0 = rng.uniform(0, 8), rng.uniform(0, 6)
    box = Box.from_corners(x0, y0, x0 + rng.uniform(1, 11 - x0), y0 + rng.uniform(1, 9 - y0))
    out = dc.roi_crop(dc.Tensor(f[None]), box, window).data[0]
    bx0, by0, _, _ = box.corners
    for r in range(window):
        for c in range(window):
            y = by0 + (r + 0.5) * box.h / window
            x = bx0 + (c + 0.5) * box.w / window
            assert out[r, c] == pytest.approx(bilinear_point(f, y, x), abs=1e-12)


def test_roi_crop_degenerate_box():
    with pytest.raises(BoxError):
        dc.roi_crop(dc.Tensor(np.zeros((1, 4, 4))), Box(2, 2, 0.5, 3), 2)


def test_bilinear_resize_cases():
    x = np.random.default_rng(1).normal(size=(2, 3, 5))
    np.testing.assert_allclose(dc.bilinear_resize(dc.Tensor(x), 3, 5).data, x, atol=1e-14)
    np.testing.assert_allclose(dc.bilinear_resize(dc.Tensor(np.full((1, 3, 3), -2.0)), 7, 2).data, -2.0)
    img = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = dc.bilinear_resize(dc.Tensor(img[None]), 1, 4).data[0, 0]
    expect = [bilinear_point(img, 1.0, (j + 0.5) * 0.5) for j in range(4)]
    np.testing.assert_allclose(out, expect, atol=1e-15)
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


# ---------------------------------------------------------------- backward and grad_check

def test_backward_identity_and_sum():
    x = dc.Tensor(np.array([[1.5]]), requires_grad=True)
    assert dc.backward(dc.sum(x))[x][0, 0] == 1.0
    y = dc.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    np.testing.assert_array_equal(dc.grad(dc.sum(2.0 * y), [y])[0], 2.0)


def test_backward_needs_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        dc.backward(x * 2.0)


def test_unreached_leaf_gets_zero():
    a = dc.Tensor(np.ones(2), requires_grad=True)
    b = dc.Tensor(np.ones(3), requires_grad=True)
    ga, gb = dc.grad(dc.sum(a * a), [a, b])
    np.testing.assert_array_equal(ga, 2.0)
    np.testing.assert_array_equal(gb, 0.0)


def test_graph_order_and_determinism():
    rng = np.random.default_rng(5)
    x = dc.Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
    k = dc.Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)

    def run():
        h = dc.relu(dc.conv2d(x, k, pad=1))
        return dc.sum(dc.max_pool2d(h) * dc.max_pool2d(h))
    out = run()
    g = dc.Graph.build(out)
    for node in g.nodes:
        assert all(i < node.id for i in node.inputs)
    first = [a.copy() for a in dc.grad(out, [x, k])]
    second = dc.grad(run(), [x, k])
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_grad_check_linear_and_quadratic():
    rng = np.random.default_rng(0)
    w = rng.normal(size=5)
    lin = dc.grad_check(lambda x: dc.sum(x * w), [rng.normal(size=5)], eps=1e-5)
    assert lin < 1e-10
    quad = dc.grad_check(lambda x: dc.sum(x * x), [rng.normal(size=5)], eps=1e-5)
    assert quad < 1e-7


def _fields(rng):
    return rng.normal(size=(1, 4, 6, 6))


OPS = {
    "conv2d": (lambda x, k, b: dc.sum(dc.mul(dc.conv2d(x, k, b, pad=1), dc.conv2d(x, k, b, pad=1))),
               lambda r: [r.normal(size=(1, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
    "conv2d_stride2": (lambda x, k, b: dc.sum(dc.mul(dc.conv2d(x, k, b, stride=2, pad=1),
                                                     dc.conv2d(x, k, b, stride=2, pad=1))),
                       lambda r: [r.normal(size=(1, 2, 6, 6)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)]),
    "group_norm": (lambda x, g, b: dc.sum(dc.mul(dc.group_norm(x, 2, g, b), dc.Tensor(np.linspace(-1, 1, 144)
                                                                                     .reshape(1, 4, 6, 6)))),
                   lambda r: [_fields(r), r.normal(size=4), r.normal(size=4)]),
    "relu": (lambda x: dc.sum(dc.mul(dc.relu(x), dc.relu(x))),
             lambda r: [r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.1]),
    "max_pool2d": (lambda x: dc.sum(dc.mul(dc.max_pool2d(x), dc.max_pool2d(x))),
                   lambda r: [r.permutation(36).reshape(1, 1, 6, 6) * 0.1]),
    "sigmoid": (lambda x: dc.sum(dc.mul(dc.sigmoid(x), x)), lambda r: [r.normal(size=(4, 3)) * 3]),
    "add_mul": (lambda a, b: dc.sum(dc.mul(dc.add(a, b), a)), lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
    "concat": (lambda a, b: dc.sum(dc.mul(dc.concat([a, b], axis=1), dc.concat([b, a], axis=1))),
               lambda r: [r.normal(size=(1, 2, 3, 3)), r.normal(size=(1, 2, 3, 3))]),
    "linear": (lambda x, w, b: dc.sum(dc.mul(dc.linear(x, w, b), dc.linear(x, w, b))),
               lambda r: [r.normal(size=(2, 5)), r.normal(size=(3, 5)), r.normal(size=3)]),
    "roi_crop": (lambda f: dc.sum(dc.mul(dc.roi_crop(f, Box(3.1, 2.7, 3.3, 2.9), 4),
                                         dc.roi_crop(f, Box(3.1, 2.7, 3.3, 2.9), 4))),
                 lambda r: [r.normal(size=(2, 6, 7))]),
    "bilinear_resize": (lambda x: dc.sum(dc.mul(dc.bilinear_resize(x, 5, 7), dc.bilinear_resize(x, 5, 7))),
                        lambda r: [r.normal(size=(2, 3, 4))]),
    "softmax": (lambda x: dc.sum(dc.mul(dc.softmax(x, axis=0), dc.Tensor(np.arange(8.0).reshape(2, 4)))),
                lambda r: [r.normal(size=(2, 4))]),
    "smooth_l1": (lambda x: dc.sum(dc.smooth_l1(x)), lambda r: [r.normal(size=7) * 2]),
    "log_exp": (lambda x: dc.sum(dc.log(dc.add(dc.exp(x), 1.0))), lambda r: [r.normal(size=5)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_many_seeds(name):
    fn, make = OPS[name]
    worst = max(dc.grad_check(fn, make(np.random.default_rng(seed)), eps=1e-6) for seed in range(20))
    assert worst < 1e-4, f"{name}: {worst}"
