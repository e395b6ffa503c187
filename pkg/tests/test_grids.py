import numpy as np
import pytest

from neuropol import grids as gr
from neuropol import rng
from neuropol.grids import Grid, GridError, make_grid


def test_make_grid_linear_spacing():
    g = make_grid(1, 3, (0.0, 1.0))
    assert np.allclose(g.axis_coords()[0], [0.0, 0.5, 1.0])


def test_make_grid_burgers_space_time():
    g = make_grid(1, 81, (0.0, 1.0), time_axis=(81, 1.0))
    assert g.shape == (81, 81)
    assert g.spacing() == (1.0 / 80.0, 1.0 / 80.0)


def test_make_grid_poisson_65():
    g = make_grid(2, (65, 65), ((-1.0, 1.0), (-1.0, 1.0)))
    assert g.shape == (65, 65)
    x = g.axis_coords()[0]
    assert np.all(np.diff(x) > 0)
    assert np.allclose(x[1] - x[0], 2.0 / 64.0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(dims=1, points_per_axis=1, bounds=(0.0, 1.0)),
        dict(dims=1, points_per_axis=5, bounds=(1.0, 0.0)),
        dict(dims=3, points_per_axis=(3, 3, 3), bounds=((0, 1),) * 3),
    ],
)
def test_make_grid_rejects_bad_input(kwargs):
    with pytest.raises(GridError):
        make_grid(**kwargs)


# -- burgers initial condition -------------------------------------------------

GRID_1D = make_grid(1, 81, (0.0, 1.0))


def _ic_at(zeta, eta, x):
    fld = gr.burgers_ic(zeta, eta, GRID_1D)
    xs = GRID_1D.axis_coords()[0]
    return float(np.interp(x, xs, fld.values[0]))


def test_burgers_ic_values():
    assert _ic_at(0.9, 1.1, 0.0) == pytest.approx(1.0)
    assert _ic_at(1.0, 1.0, 0.5) == pytest.approx(1.0)
    assert _ic_at(0.5, 1.5, 1.0) == pytest.approx(-1.0)


def test_burgers_ic_range_bounded():
    gen = rng.substream(7)
    for _ in range(50):
        z, e = rng.uniform(gen, 0.5, 1.5, 2)
        vals = gr.burgers_ic(z, e, GRID_1D).values
        assert np.all(np.abs(vals) <= 2.0)


def test_burgers_ic_rejects_2d():
    g2 = make_grid(2, (9, 9), ((0, 1), (0, 1)))
    with pytest.raises(GridError):
        gr.burgers_ic(1.0, 1.0, g2)


# -- Gaussian random field -----------------------------------------------------

NAGUMO_GRID = make_grid(1, 65, (0.0, 1.0))


def test_grf_kernel_diagonal():
    # K(x, x) = sigma^2
    fld = gr.sample_grf_1d(0.1, 0.1, NAGUMO_GRID, seed=0)
    assert fld.values.shape == (1, 65)


def test_grf_kl_dimension_is_ten():
    assert gr.grf_kl_dim(0.1, 0.1, NAGUMO_GRID) == 10


def test_grf_ensemble_variance():
    # variance at each node ~= sigma^2 = 0.01 (within truncation + MC noise)
    sq, vecs = gr._grf_kl_basis(0.1, 0.1, 65, 0.0, 1.0)
    gen = rng.substream(123)
    z = rng.normal(gen, (10_000, len(sq)))
    fields = z @ (vecs * sq).T
    var = fields.var(axis=0)
    assert np.all(np.abs(var - 0.01) < 0.002)


def test_grf_determinism():
    a = gr.sample_grf_1d(0.1, 0.1, NAGUMO_GRID, seed=42)
    b = gr.sample_grf_1d(0.1, 0.1, NAGUMO_GRID, seed=42)
    assert np.array_equal(a.values, b.values)
    c = gr.sample_grf_1d(0.1, 0.1, NAGUMO_GRID, seed=43)
    assert not np.array_equal(a.values, c.values)


def test_grf_rejects_bad_params():
    with pytest.raises(GridError):
        gr.sample_grf_1d(-1.0, 0.1, NAGUMO_GRID, seed=0)
    with pytest.raises(GridError):
        gr.sample_grf_1d(0.1, 0.0, NAGUMO_GRID, seed=0)


# -- Poisson closed forms --------------------------------------------------------

POISSON_GRID = make_grid(2, (65, 65), ((-1.0, 1.0), (-1.0, 1.0)))


def test_poisson_exact_boundary_zero():
    for a, b in [(1.0, 0.0), (-2.0, 2.0), (0.3, -1.7)]:
        u = gr.poisson_exact(a, b, POISSON_GRID).values[0]
        assert np.all(u[0, :] == 0) and np.all(u[-1, :] == 0)
        assert np.all(u[:, 0] == 0) and np.all(u[:, -1] == 0)


def test_poisson_exact_known_value():
    # alpha=1, beta=0 at (0.5, 0): sin(pi/2) * (1 + cos 0) = 2
    u = gr.poisson_exact(1.0, 0.0, POISSON_GRID)
    i = 48  # x = -1 + 48 * (2/64) = 0.5
    j = 32  # y = 0
    assert u.values[0, i, j] == pytest.approx(2.0, abs=1e-12)


def test_poisson_source_is_laplacian_of_exact():
    # discrete 5-point Laplacian converges to the closed-form source at O(h^2)
    errs = []
    for n in (33, 65, 129):
        g = make_grid(2, (n, n), ((-1.0, 1.0), (-1.0, 1.0)))
        h = g.spacing()[0]
        u = gr.poisson_exact(0.8, -1.1, g).values[0]
        f = gr.poisson_source(0.8, -1.1, g).values[0]
        lap = (
            u[2:, 1:-1] + u[:-2, 1:-1] + u[1:-1, 2:] + u[1:-1, :-2] - 4 * u[1:-1, 1:-1]
        ) / h**2
        errs.append(np.abs(lap - f[1:-1, 1:-1]).max())
    assert errs[0] / errs[1] > 3.0  # ~4x per refinement
    assert errs[1] / errs[2] > 3.0


# -- Darcy permeability ----------------------------------------------------------

DARCY_GRID = make_grid(2, (64, 64), ((0.0, 1.0), (0.0, 1.0)))


def test_darcy_leading_coefficient_variance():
    J, K, sq = gr._darcy_modes(64, 64)
    assert J[0] == 0 and K[0] == 0
    assert sq[0] ** 2 == pytest.approx(2.0245 * 2.56**-1.6, rel=1e-12)


def test_darcy_mode_count_at_99_percent():
    # 99% of the covariance trace over the grid-resolvable spectrum.
    assert gr.darcy_kl_dim(DARCY_GRID) == 54


def test_darcy_zero_mean_log_field():
    m = gr.darcy_kl_dim(DARCY_GRID)
    gen = rng.substream(5)
    z = rng.normal(gen, (10_000, m))
    # mean of g at a probe point over many draws ~ 0 within 3 standard errors
    probe = gr.darcy_log_permeability_eval(DARCY_GRID, np.zeros(m), 0.37, 0.61)
    assert probe == 0.0
    J, K, sq = gr._darcy_modes(64, 64)
    norm = np.where(J == 0, 1.0, np.sqrt(2.0)) * np.where(K == 0, 1.0, np.sqrt(2.0))
    basis = norm * sq * np.cos(np.pi * J * 0.37) * np.cos(np.pi * K * 0.61)
    vals = z @ basis
    se = vals.std() / np.sqrt(len(vals))
    assert abs(vals.mean()) < 3 * se + 1e-12


def test_darcy_positivity_and_determinism():
    a = gr.darcy_permeability(DARCY_GRID, seed=11)
    assert np.all(a.values > 0)
    b = gr.darcy_permeability(DARCY_GRID, seed=11)
    assert np.array_equal(a.values, b.values)


def test_darcy_rejects_1d():
    with pytest.raises(GridError):
        gr.darcy_permeability(GRID_1D, seed=0)


def test_darcy_gradient_consistency():
    # analytic gradient of the permeability matches finite differences
    coeffs = gr.darcy_coefficients(DARCY_GRID, seed=3)
    x, y = 0.4, 0.7
    a, ax, ay = gr.darcy_permeability_eval(DARCY_GRID, coeffs, x, y, gradient=True)
    eps = 1e-6
    fx = (gr.darcy_permeability_eval(DARCY_GRID, coeffs, x + eps, y)
          - gr.darcy_permeability_eval(DARCY_GRID, coeffs, x - eps, y)) / (2 * eps)
    fy = (gr.darcy_permeability_eval(DARCY_GRID, coeffs, x, y + eps)
          - gr.darcy_permeability_eval(DARCY_GRID, coeffs, x, y - eps)) / (2 * eps)
    assert ax == pytest.approx(fx, rel=1e-5)
    assert ay == pytest.approx(fy, rel=1e-5)


# -- batch sampling ----------------------------------------------------------------

def test_sample_batch_burgers_ranges():
    batch = gr.sample_batch("burgers", 30, seed=1)
    assert len(batch) == 30
    for s in batch:
        assert 0.5 <= s.params[0] <= 1.5 and 0.5 <= s.params[1] <= 1.5


def test_sample_batch_poisson_ranges():
    batch = gr.sample_batch("poisson", 25, seed=2, grid=POISSON_GRID)
    for s in batch:
        assert np.all(np.abs(s.params) <= 2.0)


def test_sample_batch_deterministic():
    a = gr.sample_batch("nagumo", 5, seed=9)
    b = gr.sample_batch("nagumo", 5, seed=9)
    for s, t in zip(a, b):
        assert np.array_equal(s.params, t.params)
        assert np.array_equal(s.field.values, t.field.values)


def test_sample_batch_unknown_problem():
    with pytest.raises(GridError):
        gr.sample_batch("heat", 3, seed=0)


def test_realize_sample_roundtrip():
    batch = gr.sample_batch("darcy", 2, seed=13, grid=DARCY_GRID)
    for s in batch:
        again = gr.realize_sample("darcy", s.params, DARCY_GRID, s.seed)
        assert np.array_equal(again.field.values, s.field.values)
