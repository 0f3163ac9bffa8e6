import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from crlsr import autodiff as ad
from crlsr.autodiff import DimensionError, Tensor
from crlsr.rng import Rng


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_fan_out_accumulates():
    x = t64([1.0, -2.0, 3.0], grad=True)
    ad.sum(ad.add(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_leaf_grads_accumulate_across_backward_calls():
    x = t64([1.0, 2.0], grad=True)
    ad.sum(ad.scale(x, 3.0)).backward()
    ad.sum(ad.scale(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(DimensionError):
        ad.exp(x).backward()


def test_shape_mismatch_names_op():
    with pytest.raises(DimensionError) as exc:
        ad.add(t64(np.zeros(3)), t64(np.zeros(4)))
    assert exc.value.op == "add"


def test_no_grad_builds_no_graph():
    x = t64([1.0], grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert y.record is None and not y.requires_grad


def test_default_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_subgradient_conventions():
    x = t64([0.0, 0.0], grad=True)
    ad.sum(ad.leaky_relu(x, 0.2)).backward()
    np.testing.assert_array_equal(x.grad, [0.2, 0.2])
    y = t64([0.0], grad=True)
    ad.sum(ad.abs(y)).backward()
    np.testing.assert_array_equal(y.grad, [0.0])


def test_leaky_slope_validated():
    with pytest.raises(ValueError):
        ad.leaky_relu(t64([1.0]), 1.0)


def test_grad_check_on_sum_is_exact():
    assert ad.grad_check(lambda x: ad.sum(x), [t64(np.arange(6.0).reshape(2, 3))]) < 1e-9


def test_grad_check_sum_of_squares():
    x = t64(Rng(3).normal((4, 3)))
    assert ad.grad_check(lambda v: ad.sum(ad.mul(v, v)), [x], eps=1e-4) < 1e-7


def test_grad_check_catches_corrupted_rule():
    x = t64(Rng(4).normal((3, 3)))
    with ad.inject_fault("mul"):
        assert ad.grad_check(lambda v: ad.sum(ad.mul(v, v)), [x], eps=1e-4) > 1e-2


def test_grad_check_rejects_bad_eps_and_vector_output():
    with pytest.raises(ValueError):
        ad.grad_check(lambda v: ad.sum(v), [t64([1.0])], eps=1.0)
    with pytest.raises(DimensionError):
        ad.grad_check(lambda v: ad.exp(v), [t64([1.0, 2.0])])


@pytest.mark.parametrize("seed,shape,pad", [
    (0, ((1, 1, 5, 5), (1, 1, 3, 3)), 0),
    (1, ((2, 3, 6, 5), (4, 3, 3, 3)), 1),
    (2, ((1, 2, 4, 7), (3, 2, 1, 1)), 0),
    (3, ((2, 1, 5, 4), (2, 1, 5, 5)), 2),
    (4, ((1, 4, 3, 3), (2, 4, 1, 3)), 1),
    (5, ((3, 2, 6, 6), (1, 2, 3, 3)), 1),
])
def test_conv2d_matches_direct_summation(seed, shape, pad):
    r = Rng(seed)
    x, w, b = r.normal(shape[0]), r.normal(shape[1]), r.normal((shape[1][0],))
    with ad.precision(np.float64):
        got = ad.conv2d(t64(x), t64(w), t64(b), pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, w, b, pad), atol=1e-5, rtol=0)


def test_matmul_matches_triple_loop():
    r = Rng(9)
    a, b = r.normal((4, 5)), r.normal((5, 3))
    np.testing.assert_allclose(ad.matmul(t64(a), t64(b)).data, oracles.matmul(a, b), atol=1e-12)


def test_determinism_bit_identical():
    def run():
        with ad.precision(np.float64):
            r = Rng(11)
            x, w = t64(r.normal((2, 2, 5, 5)), True), t64(r.normal((3, 2, 3, 3)), True)
            y = ad.sum(ad.leaky_relu(ad.conv2d(x, w, padding=1)))
            y.backward()
            return y.data.copy(), x.grad.copy(), w.grad.copy()
    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_log_sum_exp_is_stable():
    x = t64([[1000.0, 1000.0], [-1000.0, -1001.0]], grad=True)
    y = ad.log_sum_exp(x, axis=1)
    np.testing.assert_allclose(y.data, [1000.0 + np.log(2.0), -1000.0 + np.log1p(np.exp(-1.0))])
    ad.sum(y).backward()
    assert np.all(np.isfinite(x.grad))


def test_take_rows_scatters_repeats():
    x = t64(np.arange(6.0).reshape(3, 2), grad=True)
    ad.sum(ad.take_rows(x, [0, 0, 2])).backward()
    np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])


def test_tape_orders_records_by_creation():
    x = t64([1.0, 2.0], grad=True)
    y = ad.exp(x)
    z = ad.sum(ad.mul(y, ad.log(ad.add_scalar(x, 1.0))))
    tape = ad.Tape.from_loss(z)
    idx = [rec.index for rec, _ in tape.entries]
    assert idx == sorted(idx) and len(idx) == 5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 3), w=st.integers(1, 3),
       r=st.sampled_from([2, 3]), seed=st.integers(0, 1000))
def test_pixel_shuffle_roundtrip(n, c, h, w, r, seed):
    x = Rng(seed).normal((n, c * r * r, h, w))
    y = ad.pixel_shuffle(t64(x), r)
    assert y.shape == (n, c, h * r, w * r)
    np.testing.assert_array_equal(ad.pixel_unshuffle(y, r).data, x)


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 6), s=st.integers(1, 6), seed=st.integers(0, 1000))
def test_l2_normalize_rows_unit(m, s, seed):
    x = Rng(seed).normal((m, s)) * 5.0 + 0.1
    v = ad.l2_normalize(t64(x)).data
    norms = np.linalg.norm(v, axis=1)
    floor = 1.0 - 1e-8 / (2.0 * np.min(np.sum(x * x, axis=1)))
    assert np.all(norms <= 1.0 + 1e-15) and np.all(norms >= floor - 1e-12)


def test_l2_normalize_zero_row():
    np.testing.assert_array_equal(ad.l2_normalize(t64(np.zeros((1, 2)))).data, [[0.0, 0.0]])


@settings(max_examples=25, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 1000))
def test_sum_mean_gradients(shape, seed):
    x = t64(Rng(seed).normal(tuple(shape)), grad=True)
    ad.mean(x).backward()
    np.testing.assert_allclose(x.grad, np.full(shape, 1.0 / x.size))


def test_avg_pool_and_linear_shapes():
    x = t64(np.ones((2, 3, 4, 6)))
    assert ad.avg_pool2d(x, 2).shape == (2, 3, 2, 3)
    with pytest.raises(DimensionError):
        ad.avg_pool2d(x, 5)
    y = ad.linear(t64(np.ones((4, 3))), t64(np.ones((3, 2))), t64(np.zeros(2)))
    np.testing.assert_array_equal(y.data, np.full((4, 2), 3.0))
