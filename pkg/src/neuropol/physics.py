"""Physics machinery: stochastic-projection derivatives and PDE losses.

Spiking gates make the network non-differentiable in its inputs, so spatial
and temporal derivatives of the predicted field are estimated from randomly
sampled neighborhoods instead of the tape:

* first derivatives solve the scatter-matrix system
  ``S g = (1/N) sum_i (f(x_i) - f(xbar)) (x_i - xbar)`` with
  ``S = (1/N) sum_i (x_i - xbar)(x_i - xbar)^T``;
* second derivatives come from a local least-squares quadratic fit over the
  same kind of neighborhood.

Both estimators are linear in the sampled function values, so for training
they are assembled into sparse matrices acting on the flattened output grid
(neighbors are evaluated by bilinear interpolation of the grid field), and
gradients flow through the sampled evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import grids as gr
from . import rng as _rng
from .autodiff import Tensor
from .grids import Grid, InputSample


class StochProjError(ValueError):
    pass


@dataclass(frozen=True)
class StochProjSpec:
    """Neighborhood sampling parameters for derivative estimation.

    ``radius_factor`` is measured in units of the (per-axis) grid spacing.
    ``n_neighbors`` defaults to 12 on space-time grids and 16 on planar ones.
    """

    radius_factor: float = 2.0
    n_neighbors: int | None = None
    eps_reg: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if self.radius_factor <= 0:
            raise StochProjError("radius factor must be positive")

    def resolve_neighbors(self, ndim: int, has_time: bool) -> int:
        if self.n_neighbors is not None:
            if self.n_neighbors < ndim + 1:
                raise StochProjError("need at least dims+1 neighbors")
            return self.n_neighbors
        return 12 if has_time else 16


@dataclass(frozen=True)
class LossWeights:
    data: float = 0.0
    pde: float = 1.0
    bc: float = 10.0
    ic: float = 10.0

    def __post_init__(self):
        vals = (self.data, self.pde, self.bc, self.ic)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


# ---------------------------------------------------------------------------
# Neighborhood sampling
# ---------------------------------------------------------------------------

def _ball_offsets(gen, n_pts: int, n_nb: int, radii: np.ndarray) -> np.ndarray:
    """Uniform samples in an axis-aligned ellipsoid, shape (n_pts, n_nb, D)."""
    d = len(radii)
    z = _rng.normal(gen, (n_pts, n_nb, d))
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    norm[norm == 0] = 1.0
    u = gen.random((n_pts, n_nb, 1)) ** (1.0 / d)
    return z / norm * u * radii


def sample_neighborhoods(
    centers: np.ndarray,
    radii: np.ndarray,
    n_nb: int,
    bounds: list[tuple[float, float]],
    gen,
) -> tuple[np.ndarray, np.ndarray]:
    """Neighborhoods truncated to the domain.

    Returns (points (P, n_nb, D), truncated flags (P,)).  Out-of-domain
    candidates are rejected; each point draws a 4x oversample from its stream
    and keeps the first valid ``n_nb``, so the result is deterministic.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    P, D = centers.shape
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    offs = _ball_offsets(gen, P, 4 * n_nb, np.asarray(radii))
    cand = centers[:, None, :] + offs
    valid = np.all((cand >= lo) & (cand <= hi), axis=-1)
    # Stable selection of the first n_nb valid candidates per point.
    order = np.argsort(~valid, axis=1, kind="stable")[:, :n_nb]
    rows = np.arange(P)[:, None]
    picked = cand[rows, order]
    enough = valid[rows, order]
    if not np.all(enough):
        # Essentially unreachable for sane radii; clamp the stragglers.
        picked = np.clip(picked, lo, hi)
    truncated = ~np.all(valid, axis=1)
    return picked, truncated


def _grad_weights(offsets: np.ndarray, eps_reg: float, centers=None) -> np.ndarray:
    """Per-point weights w (P, D, N) with grad_d = sum_i w[p,d,i] (f_i - f0)."""
    P, N, D = offsets.shape
    S = np.einsum("pnd,pne->pde", offsets, offsets) / N
    # Regularize relative to the neighborhood scale so the perturbation of
    # recovered gradients stays O(eps_reg) regardless of the radius.
    tr = np.trace(S, axis1=1, axis2=2) / D
    S = S + (eps_reg * np.maximum(tr, 1e-300))[:, None, None] * np.eye(D)
    cond = np.linalg.cond(S)
    if np.any(cond > 1e13):
        bad = int(np.argmax(cond))
        where = "" if centers is None else f" at {np.asarray(centers)[bad]}"
        raise StochProjError(f"degenerate neighborhood sampling{where}")
    rhs = np.swapaxes(offsets, 1, 2) / N  # (P, D, N)
    return np.linalg.solve(S, rhs)


def _quad_design(offsets: np.ndarray) -> np.ndarray:
    """Design rows [1, delta, 0.5 delta^2, cross] for a quadratic fit."""
    P, N, D = offsets.shape
    cols = [np.ones((P, N))]
    cols.extend(offsets[..., d] for d in range(D))
    cols.extend(0.5 * offsets[..., d] ** 2 for d in range(D))
    for i in range(D):
        for j in range(i + 1, D):
            cols.append(offsets[..., i] * offsets[..., j])
    return np.stack(cols, axis=-1)  # (P, N, K)


def _quad_weights(offsets: np.ndarray, eps_reg: float) -> np.ndarray:
    """Weights (P, D, N+1) extracting diag(H); column 0 is the center value.

    Coordinates are scaled by the neighborhood extent before solving the
    normal equations, otherwise the quadratic columns are badly conditioned.
    """
    P, N, D = offsets.shape
    n_params = 1 + 2 * D + (D * (D - 1)) // 2
    if N + 1 < n_params:
        raise StochProjError(
            f"need at least {n_params - 1} neighbors for a quadratic fit, got {N}"
        )
    scale = np.abs(offsets).max(axis=(1, 2), keepdims=True)
    scale[scale == 0] = 1.0
    full = np.concatenate([np.zeros((P, 1, D)), offsets / scale], axis=1)
    A = _quad_design(full)  # (P, N+1, K)
    At = np.swapaxes(A, 1, 2)
    G = At @ A + eps_reg * np.eye(A.shape[-1])
    M = np.linalg.solve(G, At)  # (P, K, N+1)
    rows = M[:, 1 + D:1 + 2 * D, :]  # second-derivative coefficient rows
    return rows / scale.reshape(P, 1, 1) ** 2


# ---------------------------------------------------------------------------
# Reference (callable-based) estimators
# ---------------------------------------------------------------------------

def _radii_for(spec: StochProjSpec, spacings) -> np.ndarray:
    return spec.radius_factor * np.asarray(spacings, dtype=np.float64)


def stochproj_grad(f, x, spec: StochProjSpec, spacings, bounds=None, seed=None):
    """Gradient estimate of ``f`` at point ``x``.

    ``f`` must accept an (..., D) array of points.  ``spacings`` sets the
    neighborhood radius per axis (radius = radius_factor * spacing);
    ``bounds`` optionally truncates sampling to the domain.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = len(x)
    radii = _radii_for(spec, spacings)
    n_nb = spec.resolve_neighbors(d, has_time=False) if spec.n_neighbors is None else spec.n_neighbors
    gen = _rng.substream(spec.seed if seed is None else seed)
    bnd = bounds if bounds is not None else [(-np.inf, np.inf)] * d
    pts, _ = sample_neighborhoods(x[None], radii, n_nb, bnd, gen)
    offs = pts[0] - x
    w = _grad_weights(offs[None], spec.eps_reg, centers=x[None])[0]
    df = np.asarray(f(pts[0])) - np.asarray(f(x[None]))[0]
    return w @ df


def stochproj_second(f, x, spec: StochProjSpec, spacings, bounds=None, seed=None):
    """Diagonal of the Hessian of ``f`` at ``x`` via a quadratic fit."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    d = len(x)
    radii = _radii_for(spec, spacings)
    n_nb = spec.resolve_neighbors(d, has_time=False) if spec.n_neighbors is None else spec.n_neighbors
    gen = _rng.substream(spec.seed if seed is None else seed)
    bnd = bounds if bounds is not None else [(-np.inf, np.inf)] * d
    pts, _ = sample_neighborhoods(x[None], radii, n_nb, bnd, gen)
    offs = pts[0] - x
    w = _quad_weights(offs[None], spec.eps_reg)[0]  # (D, N+1)
    vals = np.concatenate([np.asarray(f(x[None])), np.asarray(f(pts[0]))])
    return w @ vals


# ---------------------------------------------------------------------------
# Grid interpolation and sparse assembly
# ---------------------------------------------------------------------------

def bilinear_taps(grid: Grid, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices (M, 4) and weights (M, 4) interpolating grid fields."""
    coords = grid.axis_coords()
    (n0, n1) = (len(coords[0]), len(coords[1]))
    lo0, lo1 = coords[0][0], coords[1][0]
    h0 = coords[0][1] - coords[0][0]
    h1 = coords[1][1] - coords[1][0]
    s0 = np.clip((pts[:, 0] - lo0) / h0, 0.0, n0 - 1.0)
    s1 = np.clip((pts[:, 1] - lo1) / h1, 0.0, n1 - 1.0)
    i0 = np.minimum(s0.astype(np.int64), n0 - 2)
    i1 = np.minimum(s1.astype(np.int64), n1 - 2)
    f0 = s0 - i0
    f1 = s1 - i1
    base = i0 * n1 + i1
    idx = np.stack([base, base + 1, base + n1, base + n1 + 1], axis=1)
    w = np.stack(
        [(1 - f0) * (1 - f1), (1 - f0) * f1, f0 * (1 - f1), f0 * f1], axis=1
    )
    return idx, w


def _rows_from_weights(point_w, nb_idx, nb_w, c_idx, c_w, n_grid):
    """CSR matrix rows: per point, sum_i point_w[p,i] * interp(x_i) + center.

    point_w: (P, N+1) with column 0 applying to the center evaluation.
    """
    P, N1 = point_w.shape
    n_taps = nb_w.shape[-1]
    rows = []
    cols = []
    data = []
    # center taps
    rows.append(np.repeat(np.arange(P), n_taps))
    cols.append(c_idx.reshape(-1))
    data.append((point_w[:, :1] * c_w.reshape(P, 1, n_taps)[:, 0]).reshape(-1))
    # neighbor taps
    nb = N1 - 1
    rows.append(np.repeat(np.arange(P), nb * n_taps))
    cols.append(nb_idx.reshape(-1))
    data.append((point_w[:, 1:, None] * nb_w.reshape(P, nb, n_taps)).reshape(-1))
    mat = sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(P, n_grid),
    )
    mat.sum_duplicates()
    return mat


@dataclass
class CollocationPlan:
    """Sparse derivative/value operators at one sample's collocation points."""

    points: np.ndarray            # (P, D)
    mats: dict                    # name -> (csr, csr_transpose)
    truncated: np.ndarray         # (P,) neighborhoods clipped at the boundary


def build_plan(
    grid: Grid,
    points: np.ndarray,
    spec: StochProjSpec,
    needs: tuple[str, ...],
    seed: int,
) -> CollocationPlan:
    """Assemble sparse operators for the requested derivative names.

    Names: ``value``, ``d0``/``d1`` (first derivative along field axis 0/1),
    ``s0``/``s1`` (second derivative), ``lap`` (s0+s1).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    P, D = points.shape
    spacings = grid.spacing()
    bounds = grid.axis_bounds()
    radii = _radii_for(spec, spacings)
    n_nb = spec.resolve_neighbors(D, has_time=grid.time_axis is not None)
    gen = _rng.substream(spec.seed, seed)
    nb_pts, truncated = sample_neighborhoods(points, radii, n_nb, bounds, gen)
    offs = nb_pts - points[:, None, :]
    n_grid = grid.n_points

    c_idx, c_w = bilinear_taps(grid, points)
    nb_flat = nb_pts.reshape(-1, D)
    nb_idx, nb_w = bilinear_taps(grid, nb_flat)
    nb_idx = nb_idx.reshape(P, n_nb, -1)

    need_grad = any(n in needs for n in ("d0", "d1"))
    need_quad = any(n in needs for n in ("s0", "s1", "lap"))
    gw = _grad_weights(offs, spec.eps_reg, centers=points) if need_grad else None
    qw = _quad_weights(offs, spec.eps_reg) if need_quad else None

    mats = {}

    def add(name, pw):
        m = _rows_from_weights(pw, nb_idx, nb_w, c_idx, c_w, n_grid)
        mats[name] = (m, m.T.tocsr())

    if "value" in needs:
        m = sp.csr_matrix(
            (c_w.reshape(-1), (np.repeat(np.arange(P), 4), c_idx.reshape(-1))),
            shape=(P, n_grid),
        )
        m.sum_duplicates()
        mats["value"] = (m, m.T.tocsr())
    for d in range(D):
        if f"d{d}" in needs:
            # Ratio estimator applies to differences f_i - f0.
            pw = np.concatenate([-gw[:, d, :].sum(axis=1, keepdims=True), gw[:, d, :]], axis=1)
            add(f"d{d}", pw)
        if f"s{d}" in needs:
            add(f"s{d}", qw[:, d, :])
    if "lap" in needs:
        add("lap", qw.sum(axis=1))
    return CollocationPlan(points, mats, truncated)


def apply_op(u_flat: Tensor, plan: CollocationPlan, name: str) -> Tensor:
    m, mt = plan.mats[name]
    return ad.sparse_map(u_flat, m, mt)


def _flatten_grid(u) -> Tensor:
    """(..., H, W) tensor/array -> (..., H*W) Tensor."""
    u = ad.as_tensor(u)
    shp = u.value.shape
    return ad.reshape(u, shp[:-2] + (shp[-2] * shp[-1],))


# ---------------------------------------------------------------------------
# PDE residuals (per sample)
# ---------------------------------------------------------------------------

def default_collocation(grid: Grid, n_points: int, seed: int, *path: int) -> np.ndarray:
    """Random interior grid nodes (without replacement when possible)."""
    coords = grid.axis_coords()
    interior = [c[1:-1] for c in coords]
    sizes = [len(c) for c in interior]
    total = int(np.prod(sizes))
    gen = _rng.substream(seed, *path)
    if n_points <= total:
        flat = gen.choice(total, size=n_points, replace=False)
    else:
        flat = gen.integers(0, total, size=n_points)
    unraveled = np.unravel_index(np.sort(flat), sizes)
    return np.stack([c[i] for c, i in zip(interior, unraveled)], axis=1)


def _plan_for(u_grid, grid, sample, points, spec, needs, seed):
    if isinstance(points, CollocationPlan):
        return points
    return build_plan(grid, points, spec, needs, seed)


def residual_burgers(u_grid, grid: Grid, sample: InputSample, points, spec: StochProjSpec,
                     seed: int = 0, nu: float = gr.BURGERS_VISCOSITY) -> Tensor:
    """u_t + u u_x - nu u_xx at the collocation points."""
    plan = _plan_for(u_grid, grid, sample, points, spec, ("value", "d0", "d1", "s0"), seed)
    u = _flatten_grid(u_grid)
    val = apply_op(u, plan, "value")
    return apply_op(u, plan, "d1") + ad.mul(val, apply_op(u, plan, "d0")) \
        - ad.scale(apply_op(u, plan, "s0"), nu)


def residual_nagumo(u_grid, grid: Grid, sample: InputSample, points, spec: StochProjSpec,
                    seed: int = 0, alpha: float = gr.NAGUMO_ALPHA,
                    epsilon: float = gr.NAGUMO_EPSILON) -> Tensor:
    """u_t - eps u_xx - u (1-u)(u-alpha) at the collocation points."""
    plan = _plan_for(u_grid, grid, sample, points, spec, ("value", "d1", "s0"), seed)
    u = _flatten_grid(u_grid)
    val = apply_op(u, plan, "value")
    reaction = ad.mul(ad.mul(val, 1.0 - val), val - alpha)
    return apply_op(u, plan, "d1") - ad.scale(apply_op(u, plan, "s0"), epsilon) - reaction


def residual_poisson(u_grid, grid: Grid, sample: InputSample, points, spec: StochProjSpec,
                     seed: int = 0) -> Tensor:
    """u_xx + u_yy - f with the closed-form source at the points."""
    plan = _plan_for(u_grid, grid, sample, points, spec, ("lap",), seed)
    u = _flatten_grid(u_grid)
    f = gr.poisson_source_values(sample.params[0], sample.params[1],
                                 plan.points[:, 0], plan.points[:, 1])
    return apply_op(u, plan, "lap") - Tensor(f)


def residual_darcy(u_grid, grid: Grid, sample: InputSample, points, spec: StochProjSpec,
                   seed: int = 0) -> Tensor:
    """-a lap(u) - grad(a).grad(u) - 1 with the analytic permeability."""
    plan = _plan_for(u_grid, grid, sample, points, spec, ("d0", "d1", "lap"), seed)
    u = _flatten_grid(u_grid)
    a, ax, ay = gr.darcy_permeability_eval(
        grid.spatial_grid(), sample.params, plan.points[:, 0], plan.points[:, 1], gradient=True
    )
    out = ad.mul(Tensor(-a), apply_op(u, plan, "lap"))
    out = out - ad.mul(Tensor(ax), apply_op(u, plan, "d0"))
    out = out - ad.mul(Tensor(ay), apply_op(u, plan, "d1"))
    return out - Tensor(np.ones(len(plan.points)))


RESIDUALS = {
    "burgers": residual_burgers,
    "nagumo": residual_nagumo,
    "poisson": residual_poisson,
    "darcy": residual_darcy,
}


# ---------------------------------------------------------------------------
# Boundary / initial condition terms
# ---------------------------------------------------------------------------

def _nagumo_flux_plan(grid: Grid, spec: StochProjSpec, seed: int) -> CollocationPlan:
    """One-sided x-derivative operators at both zero-flux boundaries."""
    x_lo, x_hi = grid.bounds[0]
    t = grid.axis_coords()[-1]
    pts = np.concatenate([
        np.stack([np.full_like(t, x_lo), t], axis=1),
        np.stack([np.full_like(t, x_hi), t], axis=1),
    ])
    return build_plan(grid, pts, spec, ("d0",), seed)


def bc_ic_terms(u_grid, grid: Grid, problem: str, sample: InputSample,
                spec: StochProjSpec | None = None, seed: int = 0,
                flux_plan: CollocationPlan | None = None) -> tuple[Tensor, Tensor]:
    """(boundary loss, initial-condition loss) for one sample's prediction.

    Burgers: periodic wrap mismatch; Nagumo: one-sided boundary derivative;
    Poisson/Darcy: squared boundary values (ic term is zero).  The Burgers
    initial-condition loss skips the duplicated wrap node, which belongs to
    the periodic boundary term.
    """
    u = ad.as_tensor(u_grid)
    zero = Tensor(0.0)
    if problem == "burgers":
        bc = ad.tmean(ad.square(u[..., 0, :] - u[..., -1, :]))
        u0 = sample.field.values[0]
        ic = ad.tmean(ad.square(u[..., :-1, 0] - Tensor(u0[:-1])))
        return bc, ic
    if problem == "nagumo":
        plan = flux_plan if flux_plan is not None else _nagumo_flux_plan(
            grid, spec or StochProjSpec(), seed
        )
        du = apply_op(_flatten_grid(u), plan, "d0")
        bc = ad.tmean(ad.square(du))
        u0 = sample.field.values[0]
        ic = ad.tmean(ad.square(u[..., :, 0] - Tensor(u0)))
        return bc, ic
    if problem in ("poisson", "darcy"):
        edges = ad.concat(
            [
                ad.reshape(u[..., 0, :], (-1,)),
                ad.reshape(u[..., -1, :], (-1,)),
                ad.reshape(u[..., 1:-1, 0], (-1,)),
                ad.reshape(u[..., 1:-1, -1], (-1,)),
            ],
            axis=-1,
        )
        return ad.tmean(ad.square(edges)), zero
    raise ValueError(f"unknown problem {problem!r}")


# ---------------------------------------------------------------------------
# Composite loss
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict  # name -> float


def composite_loss(
    model,
    batch: list[InputSample],
    weights: LossWeights,
    spec: StochProjSpec,
    *,
    problem: str | None = None,
    truths: list | None = None,
    plans: list[CollocationPlan] | None = None,
    flux_plan: CollocationPlan | None = None,
    n_collocation: int = 256,
    seed: int = 0,
) -> LossBreakdown:
    """Weighted physics loss over a batch, differentiable in the model params.

    ``plans`` (one per sample) may be supplied by the trainer to reuse the
    per-epoch collocation machinery; otherwise they are built here from
    ``seed``.  ``truths`` enables the data term for samples with labels.
    """
    if not batch:
        raise ValueError("empty batch")
    problem = problem or batch[0].problem_id
    grid = model.grid
    u = model.forward([s.field for s in batch])
    residual_fn = RESIDUALS[problem]
    needs_flux = problem == "nagumo" and weights.bc > 0
    if needs_flux and flux_plan is None:
        flux_plan = _nagumo_flux_plan(grid, spec, seed)

    terms = {"data": Tensor(0.0), "pde": Tensor(0.0), "bc": Tensor(0.0), "ic": Tensor(0.0)}
    for b, sample in enumerate(batch):
        u_b = u[b]
        if weights.pde > 0:
            if plans is not None:
                plan = plans[b]
            else:
                pts = default_collocation(grid, n_collocation, spec.seed, seed, b)
                plan = build_plan(grid, pts, spec, _needs_for(problem), _rng.stream_key(seed, b))
            r = residual_fn(u_b, grid, sample, plan, spec)
            terms["pde"] = terms["pde"] + ad.tmean(ad.square(r))
        if weights.bc > 0 or weights.ic > 0:
            bc, ic = bc_ic_terms(u_b, grid, problem, sample, spec, seed, flux_plan)
            terms["bc"] = terms["bc"] + bc
            terms["ic"] = terms["ic"] + ic
        if weights.data > 0:
            if truths is None or truths[b] is None:
                raise ValueError("data weight set but no truth fields supplied")
            tv = truths[b].values if hasattr(truths[b], "values") else np.asarray(truths[b])
            terms["data"] = terms["data"] + ad.tmean(ad.square(u_b - Tensor(tv)))

    inv_n = 1.0 / len(batch)
    total = Tensor(0.0)
    parts = {}
    for name, lam in (("data", weights.data), ("pde", weights.pde),
                      ("bc", weights.bc), ("ic", weights.ic)):
        mean_term = ad.scale(terms[name], inv_n)
        parts[name] = float(mean_term.value)
        if lam > 0:
            total = total + ad.scale(mean_term, lam)
    parts["total"] = float(total.value)
    return LossBreakdown(total, parts)


def _needs_for(problem: str) -> tuple[str, ...]:
    return {
        "burgers": ("value", "d0", "d1", "s0"),
        "nagumo": ("value", "d1", "s0"),
        "poisson": ("lap",),
        "darcy": ("d0", "d1", "lap"),
    }[problem]


def epoch_plans(
    grid: Grid,
    problem: str,
    n_samples: int,
    spec: StochProjSpec,
    n_collocation: int,
    epoch: int,
) -> list[CollocationPlan]:
    """Per-sample collocation plans, resampled per epoch from the run seed."""
    needs = _needs_for(problem)
    out = []
    for i in range(n_samples):
        pts = default_collocation(grid, n_collocation, spec.seed, 7700 + epoch, i)
        out.append(build_plan(grid, pts, spec, needs, _rng.stream_key(7900 + epoch, i)))
    return out
