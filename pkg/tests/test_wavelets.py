import numpy as np
import pytest

from neuropol import wavelets as wv
from neuropol.wavelets import WaveletError, WaveletSpec


@pytest.mark.parametrize("family", wv.FAMILIES)
def test_filter_orthonormality(family):
    h = wv.scaling_filter(family)
    g = wv.wavelet_filter(family)
    assert abs(h @ h - 1.0) < 1e-12
    assert abs(h @ g) < 1e-12
    # double-shift orthogonality
    L = len(h)
    for k in range(1, L // 2):
        assert abs(np.dot(h[: L - 2 * k], h[2 * k:])) < 1e-12


def test_db2_closed_form():
    s3 = np.sqrt(3.0)
    expect = np.array([1 + s3, 3 + s3, 3 - s3, 1 - s3]) / (4 * np.sqrt(2.0))
    assert np.allclose(wv.scaling_filter("db2"), expect, atol=1e-14)


def test_haar_constant_signal():
    spec = WaveletSpec("haar", 1, "periodic")
    c = wv.dwt(np.ones(4), spec)
    assert np.allclose(c.approx, np.sqrt(2.0))
    assert np.allclose(c.details[0], 0.0)


@pytest.mark.parametrize("family", wv.FAMILIES)
@pytest.mark.parametrize("boundary", wv.BOUNDARIES)
@pytest.mark.parametrize("n", [64, 65, 81, 101])
def test_roundtrip_1d(family, boundary, n):
    gen = np.random.default_rng(hash((family, boundary, n)) % 2**32)
    levels = wv.max_levels(n, family)
    spec = WaveletSpec(family, levels, boundary)
    x = gen.standard_normal((10, n))
    err = np.abs(wv.idwt(wv.dwt(x, spec), spec) - x).max()
    assert err <= 1e-10


def test_parseval_periodic():
    gen = np.random.default_rng(0)
    for family in wv.FAMILIES:
        spec = WaveletSpec(family, wv.max_levels(64, family), "periodic")
        x = gen.standard_normal(64)
        c = wv.dwt(x, spec)
        energy = c.approx @ c.approx + sum(d @ d for d in c.details)
        assert abs(energy - x @ x) <= 1e-10 * (x @ x)


def test_linearity():
    gen = np.random.default_rng(1)
    spec = WaveletSpec("db4", 2, "symmetric")
    x, y = gen.standard_normal((2, 81))
    ca = wv.dwt(2.5 * x - 1.5 * y, spec)
    cx = wv.dwt(x, spec)
    cy = wv.dwt(y, spec)
    assert np.allclose(ca.approx, 2.5 * cx.approx - 1.5 * cy.approx, atol=1e-12)
    for a, b, c in zip(ca.details, cx.details, cy.details):
        assert np.allclose(a, 2.5 * b - 1.5 * c, atol=1e-12)


def test_db4_against_circular_convolution_oracle():
    # independent oracle: explicit circular correlation + downsampling
    n = 64
    gen = np.random.default_rng(7)
    x = gen.standard_normal(n)
    h = wv.scaling_filter("db4")
    g = wv.wavelet_filter("db4")
    approx = np.array([sum(h[m] * x[(2 * k + m) % n] for m in range(len(h)))
                       for k in range(n // 2)])
    detail = np.array([sum(g[m] * x[(2 * k + m) % n] for m in range(len(g)))
                       for k in range(n // 2)])
    c = wv.dwt(x, WaveletSpec("db4", 1, "periodic"))
    assert np.abs(c.approx - approx).max() < 1e-12
    assert np.abs(c.details[0] - detail).max() < 1e-12


def test_idwt_zero_coeffs():
    spec = WaveletSpec("db2", 2, "symmetric")
    c = wv.dwt(np.random.default_rng(3).standard_normal(33), spec)
    c.approx = np.zeros_like(c.approx)
    c.details = [np.zeros_like(d) for d in c.details]
    assert np.allclose(wv.idwt(c, spec), 0.0)


def test_single_unit_approx_is_unit_norm():
    # periodic synthesis of one approx coefficient is an orthonormal basis atom
    spec = WaveletSpec("db4", 1, "periodic")
    c = wv.dwt(np.zeros(64), spec)
    c.approx = c.approx.copy()
    c.approx[5] = 1.0
    y = wv.idwt(c, spec)
    assert abs(np.linalg.norm(y) - 1.0) < 1e-12


def test_too_many_levels_rejected():
    with pytest.raises(WaveletError):
        wv.dwt(np.zeros(16), WaveletSpec("db4", 4, "periodic"))
    with pytest.raises(WaveletError):
        wv.dwt(np.zeros(4), WaveletSpec("db4", 1, "periodic"))


# -- 2D -----------------------------------------------------------------------

def test_dwt2_constant_zero_details():
    spec = WaveletSpec("haar", 2, "periodic")
    c = wv.dwt2(np.full((16, 16), 3.0), spec)
    for dh, dv, dd in c.details:
        assert np.abs(dh).max() < 1e-12
        assert np.abs(dv).max() < 1e-12
        assert np.abs(dd).max() < 1e-12


@pytest.mark.parametrize("boundary", wv.BOUNDARIES)
def test_roundtrip_2d_65(boundary):
    gen = np.random.default_rng(11)
    for family in wv.FAMILIES:
        spec = WaveletSpec(family, 2, boundary)
        x = gen.standard_normal((3, 65, 65))
        err = np.abs(wv.idwt2(wv.dwt2(x, spec), spec) - x).max()
        assert err <= 1e-10


def test_dwt2_transpose_equivariance():
    gen = np.random.default_rng(13)
    spec = WaveletSpec("db2", 2, "symmetric")
    x = gen.standard_normal((33, 33))
    a = wv.dwt2(x, spec)
    b = wv.dwt2(x.T, spec)
    assert np.allclose(b.approx, a.approx.T, atol=1e-12)
    for (dh_a, dv_a, dd_a), (dh_b, dv_b, dd_b) in zip(a.details, b.details):
        assert np.allclose(dh_b, dv_a.T, atol=1e-12)
        assert np.allclose(dv_b, dh_a.T, atol=1e-12)
        assert np.allclose(dd_b, dd_a.T, atol=1e-12)


def test_plan_flat_roundtrip_and_adjoints():
    gen = np.random.default_rng(17)
    for shape in [(33,), (20, 33)]:
        plan = wv.get_plan(WaveletSpec("db4", 2, "symmetric"), shape)
        x = gen.standard_normal(shape)
        flat = plan.forward(x)
        assert flat.shape[-1] == plan.n_coeff
        assert np.abs(plan.inverse(flat) - x).max() < 1e-10
        # <Ax, y> == <x, A^T y>
        y = gen.standard_normal(plan.n_coeff)
        assert abs(flat @ y - (x * plan.adjoint_forward(y)).sum()) < 1e-10
        c = gen.standard_normal(plan.n_coeff)
        z = gen.standard_normal(shape)
        assert abs((plan.inverse(c) * z).sum() - c @ plan.adjoint_inverse(z)) < 1e-10


def test_coefficient_count_not_below_input():
    for boundary in wv.BOUNDARIES:
        plan = wv.get_plan(WaveletSpec("db4", 2, boundary), (65,))
        assert plan.n_coeff >= 65
