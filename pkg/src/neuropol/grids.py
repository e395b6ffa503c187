"""Grids, fields, and the stochastic input generators for the four benchmarks.

The benchmark problems are: viscous Burgers transport (``burgers``), Nagumo
reaction-diffusion (``nagumo``), a Poisson source-to-solution map with a
closed-form solution (``poisson``), and Darcy flow through a random
log-permeability medium (``darcy``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import rng

PROBLEM_IDS = ("burgers", "nagumo", "poisson", "darcy")

KL_ENERGY_FRACTION = 0.99


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product grid, optionally extended by a time axis.

    ``spatial_shape`` holds the per-axis point counts and ``bounds`` the
    matching (lo, hi) intervals.  When ``time_axis = (n_t, T)`` is present,
    fields on the grid carry a trailing time dimension over [0, T].
    """

    spatial_shape: tuple[int, ...]
    bounds: tuple[tuple[float, float], ...]
    time_axis: tuple[int, float] | None = None

    def __post_init__(self):
        if len(self.spatial_shape) not in (1, 2):
            raise GridError("grid must have 1 or 2 spatial axes")
        if len(self.bounds) != len(self.spatial_shape):
            raise GridError("bounds/shape length mismatch")
        for n in self.spatial_shape:
            if int(n) < 2:
                raise GridError("need at least 2 points per axis")
        for lo, hi in self.bounds:
            if not hi > lo:
                raise GridError(f"inverted bounds ({lo}, {hi})")
        if self.time_axis is not None:
            n_t, horizon = self.time_axis
            if int(n_t) < 2 or not horizon > 0:
                raise GridError("time axis needs n_t >= 2 and T > 0")

    @property
    def ndim_spatial(self) -> int:
        return len(self.spatial_shape)

    @property
    def shape(self) -> tuple[int, ...]:
        """Full field shape: spatial axes, then time when present."""
        if self.time_axis is None:
            return self.spatial_shape
        return self.spatial_shape + (self.time_axis[0],)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    def axis_coords(self) -> list[np.ndarray]:
        """Coordinates per field axis (spatial axes, then time)."""
        coords = [
            np.linspace(lo, hi, n)
            for (lo, hi), n in zip(self.bounds, self.spatial_shape)
        ]
        if self.time_axis is not None:
            n_t, horizon = self.time_axis
            coords.append(np.linspace(0.0, horizon, n_t))
        return coords

    def spacing(self) -> tuple[float, ...]:
        return tuple(
            (c[-1] - c[0]) / (len(c) - 1) for c in self.axis_coords()
        )

    def axis_bounds(self) -> list[tuple[float, float]]:
        out = list(self.bounds)
        if self.time_axis is not None:
            out.append((0.0, self.time_axis[1]))
        return out

    def meshgrid(self) -> list[np.ndarray]:
        return list(np.meshgrid(*self.axis_coords(), indexing="ij"))

    def spatial_grid(self) -> "Grid":
        """The same grid with the time axis dropped."""
        if self.time_axis is None:
            return self
        return Grid(self.spatial_shape, self.bounds)

    def to_dict(self) -> dict:
        d = {
            "spatial_shape": list(self.spatial_shape),
            "bounds": [list(b) for b in self.bounds],
        }
        if self.time_axis is not None:
            d["time_axis"] = [self.time_axis[0], self.time_axis[1]]
        return d

    @staticmethod
    def from_dict(d: dict) -> "Grid":
        ta = d.get("time_axis")
        return Grid(
            tuple(int(n) for n in d["spatial_shape"]),
            tuple((float(lo), float(hi)) for lo, hi in d["bounds"]),
            (int(ta[0]), float(ta[1])) if ta else None,
        )


def make_grid(dims: int, points_per_axis, bounds, time_axis=None) -> Grid:
    """Build a uniform grid; ``points_per_axis``/``bounds`` may be scalars in 1D."""
    if dims not in (1, 2):
        raise GridError("dims must be 1 or 2")
    pts = (points_per_axis,) if np.isscalar(points_per_axis) else tuple(points_per_axis)
    if len(pts) != dims:
        raise GridError("points_per_axis length must equal dims")
    b = bounds
    if len(b) == 2 and np.isscalar(b[0]):
        b = (tuple(b),)
    b = tuple(tuple(pair) for pair in b)
    ta = None
    if time_axis is not None:
        ta = (int(time_axis[0]), float(time_axis[1]))
    return Grid(tuple(int(p) for p in pts), b, ta)


@dataclass
class Field:
    """Channel-first sampled function values on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        expect = self.grid.shape
        if self.values.ndim == len(expect):
            self.values = self.values[None]
        if self.values.shape[1:] != expect:
            raise GridError(
                f"field shape {self.values.shape[1:]} != grid shape {expect}"
            )
        if not np.all(np.isfinite(self.values)):
            raise GridError("field contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class InputSample:
    """One draw of a problem's uncertain input."""

    problem_id: str
    params: np.ndarray
    seed: int
    field: Field

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)


# ---------------------------------------------------------------------------
# Burgers: random initial condition
# ---------------------------------------------------------------------------

def burgers_ic(zeta: float, eta: float, grid: Grid) -> Field:
    """u0(x) = cos(zeta*pi*x) + sin(eta*pi*x) on a 1D spatial grid."""
    if grid.ndim_spatial != 1:
        raise GridError("burgers initial condition needs a 1D spatial grid")
    x = grid.axis_coords()[0]
    u0 = np.cos(zeta * np.pi * x) + np.sin(eta * np.pi * x)
    return Field(grid.spatial_grid(), u0[None])


# ---------------------------------------------------------------------------
# Nagumo: squared-exponential Gaussian random field initial condition
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _grf_kl_basis(sigma: float, length: float, n: int, lo: float, hi: float):
    """KL factors of the squared-exponential covariance on the grid nodes.

    Returns (sqrt_eigs, modes) truncated at 99% of the covariance trace.
    Eigenvector signs are pinned so the basis does not depend on LAPACK's
    arbitrary sign choice.
    """
    x = np.linspace(lo, hi, n)
    cov = sigma**2 * np.exp(-((x[:, None] - x[None, :]) ** 2) / (2.0 * length**2))
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    sign = np.sign(eigvecs[np.argmax(np.abs(eigvecs), axis=0), np.arange(n)])
    sign[sign == 0] = 1.0
    eigvecs = eigvecs * sign
    cum = np.cumsum(eigvals) / np.sum(eigvals)
    m = int(np.searchsorted(cum, KL_ENERGY_FRACTION) + 1)
    return np.sqrt(eigvals[:m]), eigvecs[:, :m].copy()


def grf_kl_dim(sigma: float, length: float, grid: Grid) -> int:
    """Number of KL modes kept at the 99% energy cut for this grid."""
    (lo, hi) = grid.bounds[0]
    sq, _ = _grf_kl_basis(float(sigma), float(length), grid.spatial_shape[0], lo, hi)
    return len(sq)


def sample_grf_1d(sigma: float, length: float, grid: Grid, seed: int) -> Field:
    """Zero-mean stationary Gaussian field with squared-exponential covariance."""
    if sigma <= 0 or length <= 0:
        raise GridError("sigma and correlation length must be positive")
    if grid.ndim_spatial != 1:
        raise GridError("sample_grf_1d needs a 1D spatial grid")
    coeffs = grf_coefficients(sigma, length, grid, seed)
    return grf_field_from_coefficients(sigma, length, grid, coeffs)


def grf_coefficients(sigma: float, length: float, grid: Grid, seed: int) -> np.ndarray:
    (lo, hi) = grid.bounds[0]
    sq, _ = _grf_kl_basis(float(sigma), float(length), grid.spatial_shape[0], lo, hi)
    gen = rng.substream(seed)
    return rng.normal(gen, len(sq))


def grf_field_from_coefficients(
    sigma: float, length: float, grid: Grid, coeffs: np.ndarray
) -> Field:
    (lo, hi) = grid.bounds[0]
    sq, vecs = _grf_kl_basis(float(sigma), float(length), grid.spatial_shape[0], lo, hi)
    if len(coeffs) != len(sq):
        raise GridError(
            f"expected {len(sq)} KL coefficients for this grid, got {len(coeffs)}"
        )
    u0 = vecs @ (sq * np.asarray(coeffs))
    return Field(grid.spatial_grid(), u0[None])


# ---------------------------------------------------------------------------
# Poisson: closed-form source / solution pair
# ---------------------------------------------------------------------------

def _check_poisson_grid(grid: Grid):
    if grid.ndim_spatial != 2 or grid.time_axis is not None:
        raise GridError("poisson fields live on a 2D spatial grid")
    for lo, hi in grid.bounds:
        if not (np.isclose(lo, -1.0) and np.isclose(hi, 1.0)):
            raise GridError("poisson domain is [-1, 1]^2")


def poisson_exact(alpha: float, beta: float, grid: Grid) -> Field:
    """u = alpha*sin(pi x)(1+cos(pi y)) + beta*sin(2pi x)(1-cos(2pi y))."""
    _check_poisson_grid(grid)
    X, Y = grid.meshgrid()
    u = alpha * np.sin(np.pi * X) * (1.0 + np.cos(np.pi * Y)) + beta * np.sin(
        2.0 * np.pi * X
    ) * (1.0 - np.cos(2.0 * np.pi * Y))
    # The closed form vanishes on the boundary analytically; pin the float
    # roundoff (sin(pi) ~ 1e-16) to exact zeros.
    u[0, :] = 0.0
    u[-1, :] = 0.0
    u[:, 0] = 0.0
    u[:, -1] = 0.0
    return Field(grid, u[None])


def poisson_source(alpha: float, beta: float, grid: Grid) -> Field:
    """Laplacian of :func:`poisson_exact`, evaluated in closed form."""
    _check_poisson_grid(grid)
    X, Y = grid.meshgrid()
    f = poisson_source_values(alpha, beta, X, Y)
    return Field(grid, f[None])


def poisson_source_values(alpha, beta, X, Y):
    """Closed-form source at arbitrary points (used off-grid too)."""
    fa = -np.pi**2 * np.sin(np.pi * X) * (1.0 + 2.0 * np.cos(np.pi * Y))
    fb = 4.0 * np.pi**2 * np.sin(2.0 * np.pi * X) * (2.0 * np.cos(2.0 * np.pi * Y) - 1.0)
    return alpha * fa + beta * fb


# ---------------------------------------------------------------------------
# Darcy: random log-permeability on [0, 1]^2
# ---------------------------------------------------------------------------

DARCY_AMPLITUDE = 2.0245
DARCY_SHIFT = 2.56
DARCY_EXPONENT = 1.6


@lru_cache(maxsize=8)
def _darcy_modes(nx: int, ny: int):
    """Retained cosine modes of the log-permeability covariance.

    The covariance operator ``A (-lap + c I)^(-s)`` with zero-Neumann boundary
    has eigenfunctions cos(j pi x) cos(k pi y) and eigenvalues
    ``A (pi^2 (j^2+k^2) + c)^(-s)``.  Modes are ranked by eigenvalue and
    truncated at 99% of the trace over the grid-resolvable set.
    """
    j = np.arange(nx)
    k = np.arange(ny)
    J, K = np.meshgrid(j, k, indexing="ij")
    lam = DARCY_AMPLITUDE * (np.pi**2 * (J**2 + K**2) + DARCY_SHIFT) ** (-DARCY_EXPONENT)
    flat = lam.ravel()
    # Stable ordering: by descending eigenvalue, ties broken by (j, k).
    order = np.lexsort((K.ravel(), J.ravel(), -flat))
    cum = np.cumsum(flat[order]) / flat.sum()
    m = int(np.searchsorted(cum, KL_ENERGY_FRACTION) + 1)
    keep = order[:m]
    return J.ravel()[keep], K.ravel()[keep], np.sqrt(flat[keep])


def darcy_kl_dim(grid: Grid) -> int:
    _check_darcy_grid(grid)
    return len(_darcy_modes(*grid.spatial_shape)[2])


def _check_darcy_grid(grid: Grid):
    if grid.ndim_spatial != 2 or grid.time_axis is not None:
        raise GridError("darcy permeability needs a 2D spatial grid")
    for lo, hi in grid.bounds:
        if not (np.isclose(lo, 0.0) and np.isclose(hi, 1.0)):
            raise GridError("darcy domain is [0, 1]^2")


def darcy_coefficients(grid: Grid, seed: int) -> np.ndarray:
    _check_darcy_grid(grid)
    m = darcy_kl_dim(grid)
    gen = rng.substream(seed)
    return rng.normal(gen, m)


def darcy_log_permeability_eval(
    grid: Grid, coeffs: np.ndarray, X, Y, gradient: bool = False
):
    """Evaluate the truncated log-permeability series (optionally its gradient)."""
    J, K, sq = _darcy_modes(*grid.spatial_shape)
    if len(coeffs) != len(sq):
        raise GridError(f"expected {len(sq)} KL coefficients, got {len(coeffs)}")
    # L2([0,1]^2)-orthonormal Neumann eigenfunctions: norm factor 1 / sqrt2 / 2.
    norm = np.where(J == 0, 1.0, np.sqrt(2.0)) * np.where(K == 0, 1.0, np.sqrt(2.0))
    amp = np.asarray(coeffs) * sq * norm
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    cjx = np.cos(np.pi * np.multiply.outer(J, X))
    cky = np.cos(np.pi * np.multiply.outer(K, Y))
    g = np.einsum("m,m...,m...->...", amp, cjx, cky)
    if not gradient:
        return g
    sjx = np.sin(np.pi * np.multiply.outer(J, X))
    sky = np.sin(np.pi * np.multiply.outer(K, Y))
    gx = np.einsum("m,m...,m...->...", -amp * np.pi * J, sjx, cky)
    gy = np.einsum("m,m...,m...->...", -amp * np.pi * K, cjx, sky)
    return g, gx, gy


def darcy_permeability_eval(grid: Grid, coeffs: np.ndarray, X, Y, gradient: bool = False):
    """Permeability a = exp(g) (and optionally grad a) at arbitrary points."""
    if gradient:
        g, gx, gy = darcy_log_permeability_eval(grid, coeffs, X, Y, gradient=True)
        a = np.exp(g)
        return a, a * gx, a * gy
    return np.exp(darcy_log_permeability_eval(grid, coeffs, X, Y))


def darcy_permeability(grid: Grid, seed: int) -> Field:
    """Sample a positive permeability field: exp of the Gaussian series."""
    coeffs = darcy_coefficients(grid, seed)
    return darcy_field_from_coefficients(grid, coeffs)


def darcy_field_from_coefficients(grid: Grid, coeffs: np.ndarray) -> Field:
    X, Y = grid.meshgrid()
    return Field(grid, darcy_permeability_eval(grid, coeffs, X, Y)[None])


# ---------------------------------------------------------------------------
# Problem registry and batch sampling
# ---------------------------------------------------------------------------

BURGERS_VISCOSITY = 0.1
NAGUMO_ALPHA = -0.5
NAGUMO_EPSILON = 1.0
NAGUMO_SIGMA = 0.1
NAGUMO_LENGTH = 0.1


def default_grid(problem_id: str) -> Grid:
    if problem_id == "burgers":
        return Grid((81,), ((0.0, 1.0),), (81, 1.0))
    if problem_id == "nagumo":
        return Grid((65,), ((0.0, 1.0),), (65, 1.0))
    if problem_id == "poisson":
        return Grid((65, 65), ((-1.0, 1.0), (-1.0, 1.0)))
    if problem_id == "darcy":
        return Grid((64, 64), ((0.0, 1.0), (0.0, 1.0)))
    raise GridError(f"unknown problem_id {problem_id!r}")


def param_dim(problem_id: str, grid: Grid) -> int:
    if problem_id in ("burgers", "poisson"):
        return 2
    if problem_id == "nagumo":
        return grf_kl_dim(NAGUMO_SIGMA, NAGUMO_LENGTH, grid.spatial_grid())
    if problem_id == "darcy":
        return darcy_kl_dim(grid.spatial_grid())
    raise GridError(f"unknown problem_id {problem_id!r}")


def realize_sample(problem_id: str, params: np.ndarray, grid: Grid, seed: int) -> InputSample:
    """Build the input field for given parameters (inverse of sampling)."""
    params = np.asarray(params, dtype=np.float64)
    if problem_id == "burgers":
        fld = burgers_ic(params[0], params[1], grid)
    elif problem_id == "nagumo":
        fld = grf_field_from_coefficients(NAGUMO_SIGMA, NAGUMO_LENGTH, grid.spatial_grid(), params)
    elif problem_id == "poisson":
        fld = poisson_source(params[0], params[1], grid)
    elif problem_id == "darcy":
        fld = darcy_field_from_coefficients(grid.spatial_grid(), params)
    else:
        raise GridError(f"unknown problem_id {problem_id!r}")
    return InputSample(problem_id, params, seed, fld)


def sample_one(problem_id: str, grid: Grid, seed: int) -> InputSample:
    gen = rng.substream(seed)
    if problem_id == "burgers":
        params = rng.uniform(gen, 0.5, 1.5, 2)
    elif problem_id == "poisson":
        params = rng.uniform(gen, -2.0, 2.0, 2)
    elif problem_id == "nagumo":
        params = rng.normal(gen, grf_kl_dim(NAGUMO_SIGMA, NAGUMO_LENGTH, grid.spatial_grid()))
    elif problem_id == "darcy":
        params = rng.normal(gen, darcy_kl_dim(grid.spatial_grid()))
    else:
        raise GridError(f"unknown problem_id {problem_id!r}")
    return realize_sample(problem_id, params, grid, seed)


def sample_batch(problem_id: str, n: int, seed: int, grid: Grid | None = None) -> list[InputSample]:
    """n independent input draws; sample i uses substream (seed, i)."""
    if n < 1:
        raise GridError("batch size must be >= 1")
    if grid is None:
        grid = default_grid(problem_id)
    return [
        sample_one(problem_id, grid, rng.stream_key(seed, i)) for i in range(n)
    ]
