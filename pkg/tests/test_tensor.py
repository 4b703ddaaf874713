"""Primitive-level checks: values, gradients vs finite differences, invariants."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skiplab import tensor as T
from skiplab.errors import ContractError, ShapeError
from skiplab.tensor import Tensor

FD_STEP = 1e-5
FD_RTOL = 1e-4


def finite_difference_grad(f, x):
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += FD_STEP
        xm[idx] -= FD_STEP
        g[idx] = (f(xp) - f(xm)) / (2 * FD_STEP)
        it.iternext()
    return g


def check_grad(build_loss, x0, rtol=FD_RTOL, atol=1e-8):
    """build_loss maps a Tensor to a scalar Tensor; compares autodiff to FD."""
    t = Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(t)
    loss.backward()
    fd = finite_difference_grad(lambda a: build_loss(Tensor(a)).item(), x0)
    np.testing.assert_allclose(t.grad, fd, rtol=rtol, atol=atol)


def test_silu_zero_fixed_point():
    assert T.silu(Tensor(0.0)).item() == 0.0


def test_backward_of_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.mul(x, x).backward()


def test_second_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_second_backward_through_shared_subgraph_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = T.mul(x, x)
    T.tsum(y).backward()
    with pytest.raises(ContractError):
        T.tmean(y).backward()


def test_no_grad_suppresses_tape():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, x))
    assert not y.requires_grad


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_group_norm_constant_group_is_zero():
    x = Tensor(np.full((1, 4, 3, 3), 2.5))
    w = Tensor(np.ones(4))
    b = Tensor(np.zeros(4))
    out = T.group_norm(x, w, b, num_groups=2)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4, 3, 3)))


def test_group_norm_group_count_must_divide():
    x = Tensor(np.zeros((1, 6, 2, 2)))
    with pytest.raises(ShapeError):
        T.group_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6)), num_groups=4)


@settings(max_examples=30, deadline=None)
@given(
    c=st.floats(min_value=0.05, max_value=50.0),
    seed=st.integers(min_value=0, max_value=2**31 - 1),
)
def test_group_norm_scale_invariance(c, seed):
    # positive per-group-uniform scaling must wash out, to machine precision
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 8, 4, 4))
    w = Tensor(rng.normal(size=8))
    b = Tensor(rng.normal(size=8))
    base = T.group_norm(Tensor(x), w, b, num_groups=4).data
    scaled = T.group_norm(Tensor(c * x), w, b, num_groups=4).data
    np.testing.assert_allclose(scaled, base, rtol=1e-12, atol=1e-12)


def test_group_norm_partition_matches_contiguous():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 8, 3, 3))
    w = Tensor(rng.normal(size=8))
    b = Tensor(rng.normal(size=8))
    part = [np.arange(0, 4), np.arange(4, 8)]
    a = T.group_norm(Tensor(x), w, b, num_groups=2).data
    bb = T.group_norm(Tensor(x), w, b, partition=part).data
    np.testing.assert_array_equal(a, bb)


def test_conv2d_values_against_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros_like(out)
    for n in range(2):
        for o in range(4):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    expect[n, o, i, j] = (patch * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)


def test_conv2d_gradient_finite_difference_1x1x4x4():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(1, 1, 4, 4))
    w = Tensor(rng.normal(size=(2, 1, 3, 3)))

    def loss(t):
        out = T.conv2d(t, w, padding=1)
        return T.tsum(T.mul(out, out))

    t = Tensor(x0.copy(), requires_grad=True)
    loss(t).backward()
    fd = finite_difference_grad(lambda a: loss(Tensor(a)).item(), x0)
    assert np.max(np.abs(t.grad - fd)) <= 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_primitive_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(2, 4, 4, 4))
    w = Tensor(rng.normal(size=(3, 4, 3, 3)))
    gn_w = Tensor(rng.normal(size=4) + 2.0)
    gn_b = Tensor(rng.normal(size=4))
    lin = Tensor(rng.normal(size=(4, 3)))
    other = Tensor(rng.normal(size=(2, 4, 4, 4)))

    cases = {
        "conv2d": lambda t: T.tsum(T.silu(T.conv2d(t, w, stride=1, padding=1))),
        "group_norm": lambda t: T.tsum(
            T.mul(T.group_norm(t, gn_w, gn_b, num_groups=2), other)
        ),
        "silu": lambda t: T.tsum(T.mul(T.silu(t), other)),
        "sigmoid": lambda t: T.tsum(T.mul(T.sigmoid(t), other)),
        "relu": lambda t: T.tsum(T.mul(T.relu(t), other)),
        "exp": lambda t: T.tmean(T.exp(T.mul_scalar(t, 0.3))),
        "avg_pool": lambda t: T.tsum(T.mul(T.avg_pool2d(t, 2), T.avg_pool2d(other, 2))),
        "upsample": lambda t: T.tsum(T.mul(T.upsample_nearest(t), T.upsample_nearest(other))),
        "matmul": lambda t: T.tsum(T.exp(T.mul_scalar(T.matmul(T.reshape(t, (32, 4)), lin), 0.1))),
        "concat": lambda t: T.tsum(T.mul(T.concat_channels([t, other]), T.concat_channels([other, t]))),
        "mean_axis": lambda t: T.tsum(T.mul(T.tmean(t, axis=(2, 3)), T.tmean(other, axis=(2, 3)))),
        "logsumexp": lambda t: T.tsum(T.logsumexp(T.reshape(t, (32, 4)), axis=1)),
    }
    for name, fn in cases.items():
        try:
            check_grad(fn, x0)
        except AssertionError as exc:
            raise AssertionError(f"gradient check failed for {name}: {exc}") from exc


def test_log_gradient():
    rng = np.random.default_rng(3)
    x0 = rng.uniform(0.5, 2.0, size=(3, 3))
    check_grad(lambda t: T.tsum(T.log(t)), x0)


def test_broadcast_add_and_mul_gradients():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(2, 4, 1, 1))
    big = Tensor(rng.normal(size=(2, 4, 3, 3)))
    check_grad(lambda t: T.tsum(T.mul(T.add(big, t), big)), x0)
    check_grad(lambda t: T.tsum(T.mul(T.mul(big, t), big)), x0)


def test_group_norm_floor_guards_zero_variance_gradient():
    # constant input sits on the eps floor; gradient must stay finite
    x = Tensor(np.full((1, 2, 2, 2), 3.0), requires_grad=True)
    w = Tensor(np.ones(2))
    b = Tensor(np.zeros(2))
    T.tsum(T.group_norm(x, w, b, num_groups=1)).backward()
    assert np.all(np.isfinite(x.grad))
