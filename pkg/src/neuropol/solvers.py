"""Ground-truth PDE solvers and the accuracy metric.

These back the surrogate's validation and the Monte Carlo reference results:
a pseudo-spectral integrating-factor scheme for the periodic Burgers problem,
a semi-implicit (implicit diffusion, explicit reaction) central-difference
scheme for Nagumo, and a finite-volume conjugate-gradient solve for Darcy.
Poisson truth is the closed-form solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from . import grids as gr
from .grids import Field, Grid, GridError


class SolverError(RuntimeError):
    pass


@dataclass
class SolveReport:
    solution: Field
    method: str
    step_sizes: dict
    stats: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Burgers: pseudo-spectral with integrating factor, periodic
# ---------------------------------------------------------------------------

def solve_burgers(u0: Field, nu: float, grid: Grid, max_substeps: int = 20000) -> SolveReport:
    """u_t + (u^2/2)_x = nu u_xx on [0,1] periodic, sampled on the full grid.

    The last grid node duplicates x=0; output wraps it for t > 0 while t = 0
    reports the raw sampled initial condition.
    """
    if grid.ndim_spatial != 1 or grid.time_axis is None:
        raise GridError("burgers solver needs a 1D grid with a time axis")
    n_x = grid.spatial_shape[0]
    n_t, horizon = grid.time_axis
    n = n_x - 1  # unique periodic points
    u = np.asarray(u0.values[0][:n], dtype=np.float64).copy()
    dx = grid.spacing()[0]
    k = 2.0 * np.pi * np.fft.rfftfreq(n, d=dx)
    dealias = np.ones_like(k)
    dealias[k > (2.0 / 3.0) * k.max()] = 0.0

    dt_out = horizon / (n_t - 1)
    umax = max(np.abs(u).max(), 1e-12)
    substeps = int(np.ceil(dt_out / (0.4 * dx / umax)))
    substeps = max(substeps, 4)
    if substeps > max_substeps:
        needed = int(np.ceil(horizon / (0.4 * dx / umax) / max_substeps)) + 1
        raise SolverError(
            f"time resolution violates the advective CFL budget; use n_t >= {needed}"
        )
    dt = dt_out / substeps

    half = np.exp(-nu * k**2 * dt / 2.0)
    full = half**2

    def nonlinear(v_hat):
        v = np.fft.irfft(v_hat, n=n)
        return -0.5j * k * (np.fft.rfft(v * v) * dealias)

    out = np.empty((n_x, n_t))
    out[:, 0] = u0.values[0]
    v_hat = np.fft.rfft(u)
    for j in range(1, n_t):
        for _ in range(substeps):
            k1 = nonlinear(v_hat)
            k2 = nonlinear(half * (v_hat + 0.5 * dt * k1))
            k3 = nonlinear(half * v_hat + 0.5 * dt * k2)
            k4 = nonlinear(full * v_hat + dt * half * k3)
            v_hat = full * v_hat + (dt / 6.0) * (full * k1 + 2.0 * half * (k2 + k3) + k4)
        uj = np.fft.irfft(v_hat, n=n)
        out[:n, j] = uj
        out[n, j] = uj[0]
    return SolveReport(
        Field(grid, out[None]),
        method="pseudo-spectral IF-RK4",
        step_sizes={"dx": dx, "dt": dt, "substeps": substeps},
    )


# ---------------------------------------------------------------------------
# Nagumo: implicit diffusion + explicit reaction, zero-flux boundaries
# ---------------------------------------------------------------------------

def solve_nagumo(
    u0: Field,
    alpha: float = gr.NAGUMO_ALPHA,
    epsilon: float = gr.NAGUMO_EPSILON,
    grid: Grid | None = None,
    substeps: int = 4,
) -> SolveReport:
    """u_t - eps u_xx = u(1-u)(u-alpha) with du/dx = 0 at both ends.

    Internal time stepping runs ``substeps``x finer than the output grid to
    keep the first-order splitting error below surrogate accuracy targets.
    """
    if grid is None:
        raise GridError("nagumo solver needs the space-time grid")
    if grid.ndim_spatial != 1 or grid.time_axis is None:
        raise GridError("nagumo solver needs a 1D grid with a time axis")
    n_x = grid.spatial_shape[0]
    n_t, horizon = grid.time_axis
    dx = grid.spacing()[0]
    dt = horizon / (n_t - 1) / substeps
    lam = epsilon * dt / dx**2

    # (I - dt*eps*L) with ghost-node Neumann closure in banded form.
    ab = np.zeros((3, n_x))
    ab[1, :] = 1.0 + 2.0 * lam
    ab[0, 1:] = -lam
    ab[2, :-1] = -lam
    ab[0, 1] = -2.0 * lam   # row 0: ghost u_{-1} = u_1
    ab[2, -2] = -2.0 * lam  # row n-1: ghost u_n = u_{n-2}

    def reaction(v):
        return v * (1.0 - v) * (v - alpha)

    u = np.asarray(u0.values[0], dtype=np.float64).copy()
    out = np.empty((n_x, n_t))
    out[:, 0] = u
    for j in range(1, n_t):
        for _ in range(substeps):
            rhs = u + dt * reaction(u)
            u = solve_banded((1, 1), ab, rhs)
        out[:, j] = u
    if not np.all(np.isfinite(out)):
        raise SolverError("nagumo integration produced non-finite values")
    return SolveReport(
        Field(grid, out[None]),
        method="semi-implicit Euler + central differences",
        step_sizes={"dx": dx, "dt": dt, "substeps": substeps},
    )


# ---------------------------------------------------------------------------
# Darcy: finite volume with harmonic face averages, CG solve
# ---------------------------------------------------------------------------

def solve_darcy(a: Field, grid: Grid, tol: float = 1e-10, max_iter: int = 20000) -> SolveReport:
    """-div(a grad u) = 1 on [0,1]^2 with u = 0 on the boundary."""
    if grid.ndim_spatial != 2 or grid.time_axis is not None:
        raise GridError("darcy solver needs a 2D spatial grid")
    av = a.values[0]
    if np.any(av <= 0):
        raise SolverError("permeability must be positive")
    n0, n1 = grid.spatial_shape
    h0, h1 = grid.spacing()

    def harmonic(x, y):
        return 2.0 * x * y / (x + y)

    # Face coefficients between vertex neighbors, interior unknowns only.
    ax = harmonic(av[:-1, :], av[1:, :]) / h0**2   # (n0-1, n1)
    ay = harmonic(av[:, :-1], av[:, 1:]) / h1**2   # (n0, n1-1)

    def apply_op(u):
        # u: (n0, n1) with zero boundary enforced by the caller.
        flux = np.zeros_like(u)
        dx = ax * (u[1:, :] - u[:-1, :])
        flux[:-1, :] += dx
        flux[1:, :] -= dx
        dy = ay * (u[:, 1:] - u[:, :-1])
        flux[:, :-1] += dy
        flux[:, 1:] -= dy
        return -flux

    interior = (slice(1, -1), slice(1, -1))
    b = np.zeros((n0, n1))
    b[interior] = 1.0
    diag = np.zeros((n0, n1))
    diag[:-1, :] += ax
    diag[1:, :] += ax
    diag[:, :-1] += ay
    diag[:, 1:] += ay

    u = np.zeros((n0, n1))
    r = np.zeros((n0, n1))
    r[interior] = b[interior]
    z = np.zeros((n0, n1))
    z[interior] = r[interior] / diag[interior]
    p = z.copy()
    rz = float((r[interior] * z[interior]).sum())
    b_norm = float(np.linalg.norm(b[interior]))
    n_iter = 0
    while np.linalg.norm(r[interior]) > tol * b_norm:
        n_iter += 1
        if n_iter > max_iter:
            raise SolverError("darcy CG did not converge")
        Ap = apply_op(p)
        alpha_cg = rz / float((p[interior] * Ap[interior]).sum())
        u[interior] += alpha_cg * p[interior]
        r[interior] -= alpha_cg * Ap[interior]
        z[interior] = r[interior] / diag[interior]
        rz_new = float((r[interior] * z[interior]).sum())
        p[interior] = z[interior] + (rz_new / rz) * p[interior]
        rz = rz_new
    return SolveReport(
        Field(grid, u[None]),
        method="finite volume, Jacobi-preconditioned CG",
        step_sizes={"h0": h0, "h1": h1},
        stats={"iterations": n_iter},
    )


def poisson_truth(alpha: float, beta: float, grid: Grid) -> Field:
    return gr.poisson_exact(alpha, beta, grid)


# ---------------------------------------------------------------------------
# Accuracy metric
# ---------------------------------------------------------------------------

def nmse(predictions, truths, global_ratio: bool = False) -> float:
    """Normalized mean squared error in percent.

    Default: mean over samples of ||err||^2 / ||truth||^2.  With
    ``global_ratio`` the sums run over the whole set before dividing.
    """
    preds = [p.values if hasattr(p, "values") else np.asarray(p) for p in predictions]
    trus = [t.values if hasattr(t, "values") else np.asarray(t) for t in truths]
    if len(preds) != len(trus) or not preds:
        raise ValueError("need equally many predictions and truths (>= 1)")
    num = []
    den = []
    for p, t in zip(preds, trus):
        if p.shape != t.shape:
            raise ValueError("prediction/truth shape mismatch")
        num.append(float(((p - t) ** 2).sum()))
        den.append(float((t**2).sum()))
        if den[-1] == 0.0:
            raise ValueError("truth sample has zero norm")
    if global_ratio:
        return 100.0 * sum(num) / sum(den)
    return 100.0 * float(np.mean([a / b for a, b in zip(num, den)]))


def solve_truth(sample, grid: Grid) -> Field:
    """Reference solution for one input sample on the given grid."""
    pid = sample.problem_id
    if pid == "burgers":
        return solve_burgers(sample.field, gr.BURGERS_VISCOSITY, grid).solution
    if pid == "nagumo":
        return solve_nagumo(sample.field, grid=grid).solution
    if pid == "poisson":
        return poisson_truth(sample.params[0], sample.params[1], grid)
    if pid == "darcy":
        return solve_darcy(sample.field, grid.spatial_grid()).solution
    raise GridError(f"unknown problem_id {pid!r}")
