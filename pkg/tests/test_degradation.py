import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from crlsr.degradation import (DegradationError, DegradationSpec, GaussianKernelSpec, KernelField,
                               NoiseSpec, add_awgn, bicubic_resize, convolve,
                               convolve_spatially_variant, degrade, make_anisotropic_kernel,
                               make_isotropic_kernel, resize_matrix, sample_kernel_spec)
from crlsr.rng import Rng

DATA = Path(__file__).parent / "data"


# ------------------------------------------------------------------ kernels

@settings(max_examples=50, deadline=None)
@given(sigma=st.floats(0.05, 10.0), size=st.sampled_from([3, 7, 15, 21]))
def test_isotropic_kernel_normalized_and_symmetric(sigma, size):
    k = make_isotropic_kernel(sigma, size)
    assert k.shape == (size, size)
    assert abs(k.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(k, k.T, atol=1e-15)
    np.testing.assert_allclose(k, k[::-1, ::-1], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(0.0, math.pi, exclude_max=True), l1=st.floats(0.2, 4.0), l2=st.floats(0.2, 4.0))
def test_anisotropic_kernel_normalized_and_point_symmetric(theta, l1, l2):
    k = make_anisotropic_kernel(theta, l1, l2)
    assert abs(k.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(k, k[::-1, ::-1], atol=1e-15)


def test_isotropic_kernel_matches_scalar_formula():
    np.testing.assert_allclose(make_isotropic_kernel(1.3, 7), oracles.gaussian_kernel(1.3, 7), atol=1e-15)


def test_aniso_equal_axes_is_iso():
    for sigma in (0.3, 1.0, 2.5, 4.0):
        np.testing.assert_allclose(make_anisotropic_kernel(0.0, sigma, sigma),
                                   make_isotropic_kernel(sigma), atol=1e-9)


def test_quarter_turn_swaps_axes():
    k0 = make_anisotropic_kernel(0.0, 3.0, 1.0)
    k90 = make_anisotropic_kernel(math.pi / 2, 3.0, 1.0)
    np.testing.assert_allclose(k90, k0.T, atol=1e-12)
    # At theta = 0 lambda1 stretches along x (columns).
    assert k0[10, 14] > k0[14, 10]


def test_kernel_spec_validation():
    with pytest.raises(DegradationError):
        GaussianKernelSpec(sigma=20.0)
    with pytest.raises(DegradationError):
        GaussianKernelSpec(sigma=1.0, size=4)
    with pytest.raises(DegradationError):
        GaussianKernelSpec("anisotropic", theta=4.0, lambda1=1.0, lambda2=1.0)
    with pytest.raises(DegradationError):
        KernelField(3.0, 1.0)


def test_sampled_kernels_stay_in_range():
    rng = Rng(5)
    for _ in range(50):
        spec = sample_kernel_spec(rng, "anisotropic", (0.2, 4.0))
        assert 0.2 <= spec.lambda1 <= 4.0 and 0.0 <= spec.theta < math.pi


# -------------------------------------------------------------- convolution

@pytest.mark.parametrize("seed", range(5))
def test_convolve_matches_nested_loops(seed):
    r = Rng(seed)
    img = r.uniform(0, 1, (2, 9, 11))
    k = make_isotropic_kernel(float(r.uniform(0.3, 3.0)), 7)
    np.testing.assert_allclose(convolve(img, k), oracles.convolve(img, k), atol=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_spatially_variant_matches_per_column_oracle(seed):
    r = Rng(100 + seed)
    img = r.uniform(0, 1, (1, 8, 10))
    kf = KernelField(0.3, 3.0, size=7)
    np.testing.assert_allclose(convolve_spatially_variant(img, kf),
                               oracles.convolve_columns(img, kf.sigmas(10), 7), atol=1e-5)


def test_spatially_variant_with_flat_field_equals_convolve():
    img = Rng(1).uniform(0, 1, (3, 12, 12))
    np.testing.assert_allclose(convolve_spatially_variant(img, KernelField(1.5, 1.5, size=9)),
                               convolve(img, make_isotropic_kernel(1.5, 9)), atol=1e-12)


def test_constant_image_preserved():
    img = np.full((3, 16, 16), 0.37)
    assert np.abs(convolve(img, make_anisotropic_kernel(0.7, 3.0, 0.5)) - 0.37).max() < 1e-12
    assert np.abs(convolve_spatially_variant(img, KernelField(0.2, 4.0)) - 0.37).max() < 1e-12


def test_delta_kernel_is_identity():
    img = Rng(2).uniform(0, 1, (3, 10, 10))
    delta = np.zeros((5, 5))
    delta[2, 2] = 1.0
    np.testing.assert_array_equal(convolve(img, delta), img)


def test_kernel_larger_than_image_rejected():
    with pytest.raises(DegradationError):
        convolve(np.zeros((1, 8, 8)), make_isotropic_kernel(1.0, 21))


# ------------------------------------------------------------------ bicubic

def test_bicubic_golden_checkerboard():
    golden = np.loadtxt(DATA / "bicubic_checkerboard_2x2_up2.txt")
    mh = resize_matrix(2, 4, 2.0)
    got = mh @ np.array([[1.0, 0.0], [0.0, 1.0]]) @ mh.T
    np.testing.assert_allclose(got, golden, atol=1e-12)


@pytest.mark.parametrize("scale,direction", [(2, "down"), (3, "down"), (4, "down"), (2, "up"), (3, "up")])
def test_bicubic_matches_scalar_reference(scale, direction):
    img = Rng(scale).uniform(0, 1, (2, 24, 36))
    factor = 1.0 / scale if direction == "down" else float(scale)
    np.testing.assert_allclose(bicubic_resize(img, scale, direction), oracles.bicubic(img, factor), atol=1e-12)


def test_bicubic_preserves_constants_and_rows_sum_to_one():
    for n, m, f in [(12, 6, 0.5), (12, 4, 1 / 3), (5, 20, 4.0)]:
        np.testing.assert_allclose(resize_matrix(n, m, f).sum(axis=1), 1.0, atol=1e-12)
    img = np.full((3, 16, 16), 0.25)
    np.testing.assert_allclose(bicubic_resize(img, 4, "down"), 0.25, atol=1e-12)


def test_bicubic_rejects_tiny_outputs_and_bad_scale():
    with pytest.raises(DegradationError):
        bicubic_resize(np.zeros((1, 6, 6)), 2, "down")
    with pytest.raises(DegradationError):
        bicubic_resize(np.zeros((1, 16, 16)), 5, "down")


# -------------------------------------------------------------------- noise

def test_awgn_statistics():
    img = np.full((3, 128, 128), 0.5)
    out = add_awgn(img, 10.0, Rng(0))
    resid = out - img
    sigma = 10.0 / 255.0
    assert abs(resid.mean()) < 5 * sigma / np.sqrt(resid.size)
    assert abs(resid.std() / sigma - 1.0) < 0.02


def test_awgn_zero_level_is_identity_and_clipped_range():
    img = Rng(1).uniform(0, 1, (3, 8, 8))
    np.testing.assert_array_equal(add_awgn(img, 0.0, Rng(0)), img)
    out = add_awgn(img, 100.0, Rng(0))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_awgn_ramp_length_checked():
    with pytest.raises(DegradationError):
        add_awgn(np.zeros((1, 4, 6)), np.ones(5), Rng(0))


# ----------------------------------------------------------------- pipeline

def _spec(**kw):
    base = dict(kernel=GaussianKernelSpec(sigma=2.0), scale=2, noise=NoiseSpec(level=10.0), seed=3)
    base.update(kw)
    return DegradationSpec(**base)


def test_degrade_shape_and_determinism():
    hr = Rng(7).uniform(0, 1, (3, 32, 48))
    a, b = degrade(hr, _spec()), degrade(hr, _spec())
    assert a.shape == (3, 16, 24)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, degrade(hr, _spec(seed=4)))


def test_degrade_reduces_to_bicubic():
    hr = Rng(8).uniform(0, 1, (3, 32, 32))
    out = degrade(hr, _spec(kernel=GaussianKernelSpec(sigma=0.05), noise=NoiseSpec(level=0.0)))
    np.testing.assert_allclose(out, bicubic_resize(hr, 2, "down"), atol=1e-12)


def test_degrade_requires_divisible_size():
    with pytest.raises(DegradationError):
        degrade(np.zeros((3, 33, 32)), _spec())


def test_spec_json_round_trip_all_variants():
    specs = [
        _spec(),
        _spec(kernel=GaussianKernelSpec("anisotropic", theta=0.5, lambda1=3.0, lambda2=1.0), scale=4),
        _spec(kernel=KernelField(0.2, 4.0), noise=NoiseSpec("horizontal_ramp", level_min=5, level_max=50)),
    ]
    for s in specs:
        assert DegradationSpec.from_json(s.to_json()) == s
        assert json.loads(s.to_json())["schema_version"] == 1


@pytest.mark.parametrize("text,needle", [
    ('{"scale": 2,\n "kernel": {"type": "isotropic", "sigma": 1.0},\n}', "line 3"),
    ('{"kernel": {"type": "isotropic", "sigma": 1.0}}', "scale"),
    ('{"scale": 2, "kernel": {"type": "box"}}', "kernel.type"),
    ('{"scale": 2, "kernel": {"type": "isotropic", "sigma": 99}}', "sigma"),
    ('{"schema_version": 7, "scale": 2, "kernel": {"type": "isotropic", "sigma": 1}}', "schema_version"),
])
def test_spec_errors_name_line_or_field(text, needle):
    with pytest.raises(DegradationError, match=needle):
        DegradationSpec.from_json(text)


def test_noise_ramp_spearman():
    from scipy.stats import spearmanr
    img = np.full((3, 64, 128), 0.5)
    lr = degrade(img, _spec(kernel=GaussianKernelSpec(sigma=0.05),
                            noise=NoiseSpec("horizontal_ramp", level_min=5, level_max=50)))
    col_std = lr.std(axis=(0, 1))
    assert spearmanr(np.arange(col_std.size), col_std)[0] > 0.95
