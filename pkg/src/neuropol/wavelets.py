"""Multilevel discrete wavelet transforms with perfect reconstruction.

Each decomposition level is represented by explicit analysis/synthesis
matrices, which keeps odd lengths, boundary handling, and adjoints (needed
for gradient propagation) exact and easy to reason about.  Supported
families are orthonormal Daubechies filters (haar/db2/db4/db6); boundary
handling is either circular (``periodic``) or half-sample symmetric
extension (``symmetric``).

Conventions:
  * analysis correlates the (possibly extended) signal with the filters and
    keeps the even-phase samples;
  * synthesis applies the transposed-filter reconstruction, which is an
    exact inverse for both boundary modes (for ``symmetric`` the coefficient
    set is slightly redundant, which is what makes this possible);
  * coefficient layout is deepest level first.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb, log2

import numpy as np

FAMILIES = ("haar", "db2", "db4", "db6")
BOUNDARIES = ("periodic", "symmetric")


class WaveletError(ValueError):
    pass


@dataclass(frozen=True)
class WaveletSpec:
    family: str = "db4"
    levels: int = 1
    boundary: str = "symmetric"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise WaveletError(f"unknown wavelet family {self.family!r}")
        if self.boundary not in BOUNDARIES:
            raise WaveletError(f"unknown boundary mode {self.boundary!r}")
        if self.levels < 1:
            raise WaveletError("levels must be >= 1")


@dataclass
class WaveletCoeffs:
    """Multilevel coefficients; ``details[0]`` is the deepest level.

    For 2D transforms each detail entry is an (dh, dv, dd) tuple holding the
    high-pass sub-bands (last axis, second-to-last axis, both).
    ``level_shapes[k]`` records the input shape consumed by level ``k``,
    which the inverse needs to undo boundary bookkeeping exactly.
    """

    approx: np.ndarray
    details: list
    level_shapes: list
    ndim: int


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def _daubechies(n_moments: int) -> np.ndarray:
    """Scaling filter with ``n_moments`` vanishing moments (length 2N).

    Spectral factorization: roots of the binomial half-band polynomial are
    split by magnitude and the minimum-phase half is kept.
    """
    N = n_moments
    # q(z) = z^(N-1) * P((2 - z - 1/z)/4), ascending coefficients.
    yz = np.array([-0.25, 0.5, -0.25])  # (y*z) as an ascending polynomial in z
    q = np.zeros(2 * N - 1)
    term = np.array([1.0])
    for k in range(N):
        shifted = np.zeros(2 * N - 1)
        lo = N - 1 - k
        shifted[lo:lo + len(term)] = comb(N - 1 + k, k) * term
        q += shifted
        term = np.convolve(term, yz)
    roots = np.roots(q[::-1])
    # Newton-polish for full double precision.
    dq = np.polyder(np.poly1d(q[::-1]))
    pq = np.poly1d(q[::-1])
    for _ in range(3):
        roots = roots - pq(roots) / dq(roots)
    kept = roots[np.abs(roots) < 1.0]
    if len(kept) != N - 1:
        raise WaveletError("filter factorization failed")
    # Stable ordering of the retained roots.
    kept = kept[np.lexsort((kept.imag.round(12), kept.real.round(12)))]
    h = np.array([1.0 + 0.0j])
    for r in kept:
        h = np.convolve(h, np.array([-r, 1.0]))
    for _ in range(N):
        h = np.convolve(h, np.array([1.0, 1.0]))
    if np.max(np.abs(h.imag)) > 1e-10:
        raise WaveletError("filter factorization produced complex coefficients")
    h = h.real
    h /= np.linalg.norm(h)
    if abs(h[0]) < abs(h[-1]):
        h = h[::-1]
    if h.sum() < 0:
        h = -h
    return h


@lru_cache(maxsize=None)
def scaling_filter(family: str) -> np.ndarray:
    if family == "haar":
        return np.array([1.0, 1.0]) / np.sqrt(2.0)
    return _daubechies({"db2": 2, "db4": 4, "db6": 6}[family])


def wavelet_filter(family: str) -> np.ndarray:
    """Conjugate quadrature mirror of the scaling filter."""
    h = scaling_filter(family)
    g = h[::-1].copy()
    g[1::2] *= -1.0
    return g


def max_levels(n: int, family: str) -> int:
    length = len(scaling_filter(family))
    if n < length:
        return 0
    return int(log2(n / length)) + 1


# ---------------------------------------------------------------------------
# Per-level matrices
# ---------------------------------------------------------------------------

def _reflect_half(j: int, n: int) -> int:
    # Half-sample symmetric index with period 2n: ... x1 x0 | x0 x1 ... x_{n-1} | x_{n-1} ...
    m = j % (2 * n)
    return m if m < n else 2 * n - 1 - m


@lru_cache(maxsize=None)
def _level_mats(family: str, boundary: str, n: int):
    """(A_lo, A_hi, S_lo, S_hi) for one decomposition level of length ``n``.

    ``A_*`` map a length-n signal to coefficients; ``S_*`` map coefficients
    back so that S_lo @ A_lo + S_hi @ A_hi == I exactly.
    """
    h = scaling_filter(family)
    g = wavelet_filter(family)
    L = len(h)
    if n < L:
        raise WaveletError(f"signal length {n} shorter than filter length {L}")

    if boundary == "periodic":
        if n % 2 == 1:
            A_lo, A_hi, S_lo, S_hi = _level_mats(family, boundary, n + 1)
            pad = np.zeros((n + 1, n))
            pad[np.arange(n), np.arange(n)] = 1.0
            pad[n, n - 1] = 1.0  # repeat the last sample
            trim = np.zeros((n, n + 1))
            trim[np.arange(n), np.arange(n)] = 1.0
            return A_lo @ pad, A_hi @ pad, trim @ S_lo, trim @ S_hi
        nc = n // 2
        A_lo = np.zeros((nc, n))
        A_hi = np.zeros((nc, n))
        for k in range(nc):
            for m in range(L):
                A_lo[k, (2 * k + m) % n] += h[m]
                A_hi[k, (2 * k + m) % n] += g[m]
        # Stacked analysis is orthogonal, so synthesis is the transpose.
        return A_lo, A_hi, A_lo.T.copy(), A_hi.T.copy()

    # Symmetric extension by L-1 on both sides, even-phase downsampling.
    p = L - 1
    ext = np.zeros((n + 2 * p, n))
    for i in range(n + 2 * p):
        ext[i, _reflect_half(i - p, n)] = 1.0
    k_last = (p + n - 1) // 2
    nc = k_last + 1
    C_lo = np.zeros((nc, n + 2 * p))
    C_hi = np.zeros((nc, n + 2 * p))
    for k in range(nc):
        for m in range(L):
            C_lo[k, 2 * k + m] = h[m]
            C_hi[k, 2 * k + m] = g[m]
    A_lo = C_lo @ ext
    A_hi = C_hi @ ext
    # x[i] = sum_k cA[k] h[(i+p) - 2k] + cD[k] g[(i+p) - 2k]: exact because the
    # shifted filter pairs form an orthonormal basis of the extended line and
    # every basis function overlapping the interior window is retained.
    S_lo = np.zeros((n, nc))
    S_hi = np.zeros((n, nc))
    for i in range(n):
        for k in range(nc):
            m = i + p - 2 * k
            if 0 <= m < L:
                S_lo[i, k] = h[m]
                S_hi[i, k] = g[m]
    return A_lo, A_hi, S_lo, S_hi


def coeff_len(family: str, boundary: str, n: int) -> int:
    return _level_mats(family, boundary, n)[0].shape[0]


def _apply(mat: np.ndarray, x: np.ndarray, axis: int) -> np.ndarray:
    # Copy-free paths for the two axes the transforms actually use.
    if axis in (-1, x.ndim - 1):
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1]) if x.flags.c_contiguous else x.reshape(-1, x.shape[-1])
        return (flat @ mat.T).reshape(lead + (mat.shape[0],))
    if axis in (-2, x.ndim - 2):
        return np.matmul(mat, x)
    moved = np.moveaxis(x, axis, -1)
    lead = moved.shape[:-1]
    out = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1]) @ mat.T
    return np.moveaxis(out.reshape(lead + (mat.shape[0],)), -1, axis)


def _check_levels(spec: WaveletSpec, n: int):
    allowed = max_levels(n, spec.family)
    if allowed < 1:
        raise WaveletError(
            f"signal length {n} shorter than {spec.family} filter"
        )
    if spec.levels > allowed:
        raise WaveletError(
            f"{spec.levels} levels exceed the maximum {allowed} for length {n}"
        )


# ---------------------------------------------------------------------------
# 1D multilevel transform (vectorized over leading axes)
# ---------------------------------------------------------------------------

def dwt(x: np.ndarray, spec: WaveletSpec) -> WaveletCoeffs:
    x = np.asarray(x, dtype=np.float64)
    _check_levels(spec, x.shape[-1])
    details = []
    shapes = []
    cur = x
    for _ in range(spec.levels):
        n = cur.shape[-1]
        A_lo, A_hi, _, _ = _level_mats(spec.family, spec.boundary, n)
        shapes.append((n,))
        details.append(_apply(A_hi, cur, -1))
        cur = _apply(A_lo, cur, -1)
    details.reverse()
    shapes.reverse()
    return WaveletCoeffs(cur, details, shapes, ndim=1)


def idwt(coeffs: WaveletCoeffs, spec: WaveletSpec) -> np.ndarray:
    if coeffs.ndim != 1 or len(coeffs.details) != spec.levels:
        raise WaveletError("coefficient structure does not match spec")
    cur = coeffs.approx
    for d, (n,) in zip(coeffs.details, coeffs.level_shapes):
        _, _, S_lo, S_hi = _level_mats(spec.family, spec.boundary, n)
        if cur.shape[-1] != S_lo.shape[1] or d.shape[-1] != S_hi.shape[1]:
            raise WaveletError("coefficient lengths do not match bookkeeping")
        cur = _apply(S_lo, cur, -1) + _apply(S_hi, d, -1)
    return cur


# ---------------------------------------------------------------------------
# 2D separable multilevel transform (last two axes)
# ---------------------------------------------------------------------------

def dwt2(x: np.ndarray, spec: WaveletSpec) -> WaveletCoeffs:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise WaveletError("dwt2 needs at least a 2D input")
    _check_levels(spec, x.shape[-1])
    _check_levels(spec, x.shape[-2])
    details = []
    shapes = []
    cur = x
    for _ in range(spec.levels):
        nr, nc = cur.shape[-2], cur.shape[-1]
        Ar_lo, Ar_hi, _, _ = _level_mats(spec.family, spec.boundary, nr)
        Ac_lo, Ac_hi, _, _ = _level_mats(spec.family, spec.boundary, nc)
        lo = _apply(Ac_lo, cur, -1)
        hi = _apply(Ac_hi, cur, -1)
        ll = _apply(Ar_lo, lo, -2)
        dh = _apply(Ar_lo, hi, -2)
        dv = _apply(Ar_hi, lo, -2)
        dd = _apply(Ar_hi, hi, -2)
        shapes.append((nr, nc))
        details.append((dh, dv, dd))
        cur = ll
    details.reverse()
    shapes.reverse()
    return WaveletCoeffs(cur, details, shapes, ndim=2)


def idwt2(coeffs: WaveletCoeffs, spec: WaveletSpec) -> np.ndarray:
    if coeffs.ndim != 2 or len(coeffs.details) != spec.levels:
        raise WaveletError("coefficient structure does not match spec")
    cur = coeffs.approx
    for (dh, dv, dd), (nr, nc) in zip(coeffs.details, coeffs.level_shapes):
        _, _, Sr_lo, Sr_hi = _level_mats(spec.family, spec.boundary, nr)
        _, _, Sc_lo, Sc_hi = _level_mats(spec.family, spec.boundary, nc)
        lo = _apply(Sr_lo, cur, -2) + _apply(Sr_hi, dv, -2)
        hi = _apply(Sr_lo, dh, -2) + _apply(Sr_hi, dd, -2)
        cur = _apply(Sc_lo, lo, -1) + _apply(Sc_hi, hi, -1)
    return cur


# ---------------------------------------------------------------------------
# Flattened-vector plans (linear maps with exact adjoints, for autodiff)
# ---------------------------------------------------------------------------

class WaveletPlan:
    """Fixed-shape transform exposed as a flat linear map.

    Coefficient vector layout: deepest approximation block first, then detail
    blocks deepest-to-shallowest (dh, dv, dd per level in 2D).  The first
    ``n_retained`` entries are the blocks a band-limited kernel acts on.
    """

    def __init__(self, spec: WaveletSpec, shape: tuple[int, ...]):
        self.spec = spec
        self.shape = tuple(int(s) for s in shape)
        self.ndim = len(self.shape)
        if self.ndim not in (1, 2):
            raise WaveletError("plans support 1D or 2D shapes")
        probe = np.zeros(self.shape)
        c = dwt(probe, spec) if self.ndim == 1 else dwt2(probe, spec)
        self._template = c
        blocks = [("approx", c.approx.shape)]
        for lvl, d in enumerate(c.details):
            if self.ndim == 1:
                blocks.append((f"d{lvl}", d.shape))
            else:
                for name, sub in zip(("dh", "dv", "dd"), d):
                    blocks.append((f"{name}{lvl}", sub.shape))
        self.block_shapes = blocks
        sizes = [int(np.prod(s)) for _, s in blocks]
        self.block_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_coeff = int(self.block_offsets[-1])
        n_deep = 1 if self.ndim == 1 else 3
        self.n_retained = int(self.block_offsets[1 + n_deep])
        self.n_points = int(np.prod(self.shape))
        self.forward_macs, self.inverse_macs = self._count_macs()

    def _count_macs(self) -> tuple[int, int]:
        """Multiplies per analysis/synthesis pass on one field slab."""
        fam, bnd = self.spec.family, self.spec.boundary
        fw = inv = 0
        for shp in self._template.level_shapes:
            if self.ndim == 1:
                (n,) = shp
                A_lo, A_hi, S_lo, S_hi = _level_mats(fam, bnd, n)
                fw += np.count_nonzero(A_lo) + np.count_nonzero(A_hi)
                inv += np.count_nonzero(S_lo) + np.count_nonzero(S_hi)
            else:
                nr, nc = shp
                Ar = _level_mats(fam, bnd, nr)
                Ac = _level_mats(fam, bnd, nc)
                ncc = Ac[0].shape[0]
                nrc = Ar[0].shape[0]
                fw += nr * (np.count_nonzero(Ac[0]) + np.count_nonzero(Ac[1]))
                fw += 2 * ncc * (np.count_nonzero(Ar[0]) + np.count_nonzero(Ar[1]))
                inv += 2 * ncc * (np.count_nonzero(Ar[2]) + np.count_nonzero(Ar[3]))
                inv += nr * (np.count_nonzero(Ac[2]) + np.count_nonzero(Ac[3]))
        return int(fw), int(inv)

    def _split(self, flat: np.ndarray) -> WaveletCoeffs:
        lead = flat.shape[:-1]
        arrs = []
        for (name, shp), o0, o1 in zip(
            self.block_shapes, self.block_offsets[:-1], self.block_offsets[1:]
        ):
            arrs.append(flat[..., o0:o1].reshape(lead + shp))
        approx = arrs[0]
        rest = arrs[1:]
        if self.ndim == 1:
            details = list(rest)
        else:
            details = [tuple(rest[3 * i:3 * i + 3]) for i in range(len(rest) // 3)]
        return WaveletCoeffs(approx, details, list(self._template.level_shapes), self.ndim)

    def _flatten(self, coeffs: WaveletCoeffs) -> np.ndarray:
        arrs = [coeffs.approx]
        for d in coeffs.details:
            arrs.extend(d if self.ndim == 2 else [d])
        lead = arrs[0].shape[: arrs[0].ndim - self.ndim]
        return np.concatenate([a.reshape(lead + (-1,)) for a in arrs], axis=-1)

    # -- forward analysis and its exact transpose ---------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        c = dwt(x, self.spec) if self.ndim == 1 else dwt2(x, self.spec)
        return self._flatten(c)

    def adjoint_forward(self, gc: np.ndarray) -> np.ndarray:
        c = self._split(np.asarray(gc, dtype=np.float64))
        cur = c.approx
        for d, shp in zip(c.details, c.level_shapes):
            if self.ndim == 1:
                (n,) = shp
                A_lo, A_hi, _, _ = _level_mats(self.spec.family, self.spec.boundary, n)
                cur = _apply(A_lo.T, cur, -1) + _apply(A_hi.T, d, -1)
            else:
                nr, nc = shp
                Ar_lo, Ar_hi, _, _ = _level_mats(self.spec.family, self.spec.boundary, nr)
                Ac_lo, Ac_hi, _, _ = _level_mats(self.spec.family, self.spec.boundary, nc)
                dh, dv, dd = d
                lo = _apply(Ar_lo.T, cur, -2) + _apply(Ar_hi.T, dv, -2)
                hi = _apply(Ar_lo.T, dh, -2) + _apply(Ar_hi.T, dd, -2)
                cur = _apply(Ac_lo.T, lo, -1) + _apply(Ac_hi.T, hi, -1)
        return cur

    # -- inverse synthesis and its exact transpose --------------------------

    def inverse(self, flat: np.ndarray) -> np.ndarray:
        c = self._split(np.asarray(flat, dtype=np.float64))
        return idwt(c, self.spec) if self.ndim == 1 else idwt2(c, self.spec)

    def adjoint_inverse(self, gx: np.ndarray) -> np.ndarray:
        cur = np.asarray(gx, dtype=np.float64)
        details = []
        for shp in reversed(self._template.level_shapes):
            if self.ndim == 1:
                (n,) = shp
                _, _, S_lo, S_hi = _level_mats(self.spec.family, self.spec.boundary, n)
                details.append(_apply(S_hi.T, cur, -1))
                cur = _apply(S_lo.T, cur, -1)
            else:
                nr, nc = shp
                _, _, Sr_lo, Sr_hi = _level_mats(self.spec.family, self.spec.boundary, nr)
                _, _, Sc_lo, Sc_hi = _level_mats(self.spec.family, self.spec.boundary, nc)
                lo = _apply(Sc_lo.T, cur, -1)
                hi = _apply(Sc_hi.T, cur, -1)
                dh = _apply(Sr_lo.T, hi, -2)
                dv = _apply(Sr_hi.T, lo, -2)
                dd = _apply(Sr_hi.T, hi, -2)
                details.append((dh, dv, dd))
                cur = _apply(Sr_lo.T, lo, -2)
        details.reverse()
        return self._flatten(
            WaveletCoeffs(cur, details, list(self._template.level_shapes), self.ndim)
        )


_PLAN_CACHE: dict = {}


def get_plan(spec: WaveletSpec, shape: tuple[int, ...]) -> WaveletPlan:
    key = (spec, tuple(shape))
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = _PLAN_CACHE[key] = WaveletPlan(spec, tuple(shape))
    return plan
