"""Monte Carlo reliability estimators over any response source.

A response source maps an input sample to a solution field (a trained
surrogate or a reference solver).  A limit state reduces the field to a
scalar quantity of interest (spatial maximum by default, per time slice for
time-dependent problems) and declares failure when it reaches the threshold.
The failure direction and max-type response are design choices validated
against the closed-form Poisson benchmark.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .grids import Field


class ReliabilityError(ValueError):
    pass


CENSORED = np.inf


@dataclass(frozen=True)
class LimitState:
    """Failure when qoi(u) >= threshold; margin m = threshold - qoi."""

    threshold: float
    qoi: str = "max"

    def __post_init__(self):
        if np.isnan(self.threshold):
            raise ReliabilityError("threshold must not be NaN")
        if self.qoi not in ("max",):
            raise ReliabilityError(f"unknown qoi reduction {self.qoi!r}")

    def margins(self, solution: Field) -> np.ndarray:
        """Scalar margin, or a per-time-step vector on time grids."""
        v = solution.values
        if solution.grid.time_axis is not None:
            q = v.reshape(-1, v.shape[-1]).max(axis=0)  # max over channels+space per t
        else:
            q = np.array([v.max()])
        return self.threshold - q


@dataclass
class MarginSample:
    sample_id: int
    margins: np.ndarray  # (1,) or (n_t,)
    tau: float = CENSORED  # first failure time; inf when censored

    @property
    def censored(self) -> bool:
        return not np.isfinite(self.tau)


def evaluate_margins(response_source, samples, limit_state: LimitState) -> list[MarginSample]:
    """Run the response source over samples and reduce to margins.

    ``response_source`` is a callable sample -> Field (or list of samples ->
    list of Fields, detected by a ``batched`` attribute).
    """
    out = []
    if getattr(response_source, "batched", False):
        fields = response_source(samples)
        pairs = zip(samples, fields)
    else:
        pairs = ((s, response_source(s)) for s in samples)
    for i, (s, fld) in enumerate(pairs):
        try:
            m = limit_state.margins(fld)
        except Exception as exc:  # pragma: no cover - defensive context
            raise ReliabilityError(f"margin evaluation failed for sample {i}: {exc}") from exc
        ms = MarginSample(i, m)
        out.append(ms)
    return out


def failure_probability(margins) -> tuple[float, float]:
    """(p_f, binomial standard error); failure is any margin <= 0."""
    ms = list(margins)
    if not ms:
        raise ReliabilityError("no margin samples")
    flags = []
    for m in ms:
        arr = m.margins if isinstance(m, MarginSample) else np.atleast_1d(m)
        flags.append(bool(np.any(arr <= 0.0)))
    p = float(np.mean(flags))
    se = float(np.sqrt(p * (1.0 - p) / len(flags)))
    return p, se


def first_passage(margin_sample: MarginSample, time_grid: np.ndarray) -> float:
    """First grid time with margin <= 0 (grid-right convention), inf if none."""
    m = np.atleast_1d(margin_sample.margins)
    if len(m) != len(time_grid):
        raise ReliabilityError("margin vector does not match the time grid")
    hits = np.nonzero(m <= 0.0)[0]
    tau = float(time_grid[hits[0]]) if len(hits) else CENSORED
    margin_sample.tau = tau
    return tau


def first_passage_all(margin_samples, time_grid) -> np.ndarray:
    return np.array([first_passage(m, np.asarray(time_grid)) for m in margin_samples])


def survival_curve(taus, time_grid) -> tuple[np.ndarray, np.ndarray]:
    """Empirical survival S(t_k) = P(tau > t_k) and failure 1 - S."""
    taus = np.asarray(taus, dtype=np.float64)
    tg = np.asarray(time_grid, dtype=np.float64)
    s = np.array([(taus > t).mean() for t in tg])
    return s, 1.0 - s


def fpft_pdf(taus, horizon: float, n_grid: int = 256):
    """Kernel density of the first-passage time on [0, horizon].

    Gaussian kernels with Silverman bandwidth over the non-censored times,
    reflected at both ends so the density integrates to (1 - censored mass).
    Returns (t_grid, density, censored_mass).
    """
    taus = np.asarray(taus, dtype=np.float64)
    if taus.size == 0:
        raise ReliabilityError("no first-passage times")
    finite = taus[np.isfinite(taus)]
    censored_mass = 1.0 - len(finite) / len(taus)
    if len(finite) < 2:
        raise ReliabilityError("need at least 2 non-censored times for a density")
    n = len(finite)
    std = float(np.std(finite, ddof=1))
    q75, q25 = np.percentile(finite, [75, 25])
    spread = min(std, (q75 - q25) / 1.34) if q75 > q25 else std
    bw = 0.9 * spread * n ** (-0.2)
    bw = max(bw, 1e-3 * horizon)  # degenerate samples: narrow peak, not a delta
    t = np.linspace(0.0, horizon, n_grid)
    def kernel_sum(centers):
        z = (t[:, None] - centers[None, :]) / bw
        return np.exp(-0.5 * z**2).sum(axis=1) / (n * bw * np.sqrt(2 * np.pi))
    dens = kernel_sum(finite) + kernel_sum(-finite) + kernel_sum(2 * horizon - finite)
    dens *= 1.0 - censored_mass
    return t, dens, censored_mass


def reliability_index(p_f: float) -> float:
    """beta = -Phi^{-1}(p_f); +-inf with a warning at the degenerate ends."""
    if p_f < 0.0 or p_f > 1.0:
        raise ReliabilityError("failure probability must lie in [0, 1]")
    if p_f == 0.0 or p_f == 1.0:
        warnings.warn("degenerate failure probability; reliability index is infinite")
        return np.inf if p_f == 0.0 else -np.inf
    return float(-ndtri(p_f))


# ---------------------------------------------------------------------------
# Response sources
# ---------------------------------------------------------------------------

class SurrogateSource:
    """Batched response source wrapping a trained model."""

    batched = True

    def __init__(self, model, batch_size: int = 64):
        self.model = model
        self.batch_size = batch_size

    def __call__(self, samples) -> list[Field]:
        return self.model.predict_fields(samples, batch_size=self.batch_size)


class SolverSource:
    """Response source delegating to the reference solvers."""

    batched = False

    def __init__(self, grid, jobs: int = 1):
        self.grid = grid
        self.jobs = jobs

    def __call__(self, sample) -> Field:
        from .solvers import solve_truth

        return solve_truth(sample, self.grid)

    def solve_all(self, samples) -> list[Field]:
        from .solvers import solve_truth

        if self.jobs <= 1 or len(samples) < 4:
            return [solve_truth(s, self.grid) for s in samples]
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            return list(pool.map(lambda s: solve_truth(s, self.grid), samples))
