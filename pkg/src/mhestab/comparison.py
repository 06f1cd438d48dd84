"""Calculus for comparison functions.

This module holds the K / K-infinity / KL function families that everything
else is phrased in: detectability certificates, estimator stage costs, and the
stability bounds are all combinations of these objects.  It also provides the
global max-or-sum fold (``PlusMode``) that has to be fixed once per analysis
run, and the triangle-growth constants N(s) used to split arguments of the
form a1 + a2.

Functions are closed parametric families rather than opaque callables.  That
choice is deliberate: inverses, summability tails, and serialization all have
to be *checkable*, so the admissible shapes are enumerated and each family
carries the analytic structure it needs (closed-form inverse where available,
bisection otherwise, geometric tail bounds for summability evidence).

All objects are immutable after construction and safe to share between
workers.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

TOL_INV = 1e-12           # relative tolerance for bisection inverses
MAX_BISECT = 200          # iteration cap for bisection
GRID_R_MIN = 1e-9
GRID_R_MAX = 1e3
GRID_POINTS_PER_DECADE = 64


class DomainError(ValueError):
    """Raised when an argument is outside a function's declared domain."""


class CapabilityError(RuntimeError):
    """Raised when a family cannot provide a requested analytic operation."""


# ---------------------------------------------------------------------------
# PlusMode and folds
# ---------------------------------------------------------------------------

class PlusMode(Enum):
    """The global choice between summation and maximization.

    A single mode is fixed per analysis run and threaded through all derived
    artifacts; mixing modes inside one derivation chain is rejected by the
    consuming constructors.
    """

    MAX = "max"
    SUM = "sum"


def plus_reduce(mode: PlusMode, values: Sequence[float]) -> float:
    """Fold nonnegative values with the run's plus operation.

    The empty fold is 0 in both modes.  Negative inputs are a domain error:
    every quantity folded here is a distance or a comparison-function value.
    """
    total_max = 0.0
    total_sum = 0.0
    for v in values:
        v = float(v)
        if v < 0.0 or math.isnan(v):
            raise DomainError(f"plus_reduce requires nonnegative values, got {v}")
        total_sum += v
        if v > total_max:
            total_max = v
    return total_sum if mode is PlusMode.SUM else total_max


def plus2(mode: PlusMode, a: float, b: float) -> float:
    """Two-argument form of :func:`plus_reduce`."""
    return plus_reduce(mode, (a, b))


def log_grid(lo: float = GRID_R_MIN, hi: float = GRID_R_MAX,
             per_decade: int = GRID_POINTS_PER_DECADE) -> np.ndarray:
    """Logarithmic grid used by the default monotonicity/contraction checks."""
    if not (0 < lo < hi):
        raise DomainError("log_grid needs 0 < lo < hi")
    decades = math.log10(hi / lo)
    n = max(2, int(round(decades * per_decade)) + 1)
    return np.geomspace(lo, hi, n)


def _bisect_inverse(f: Callable[[float], float], y: float,
                    tol: float = TOL_INV, max_iter: int = MAX_BISECT) -> float:
    """Solve f(x) = y for increasing f with f(0) = 0 by bracketed bisection."""
    if y < 0:
        raise DomainError("inverse target must be nonnegative")
    if y == 0.0:
        return 0.0
    hi = 1.0
    for _ in range(300):
        if f(hi) >= y:
            break
        hi *= 2.0
        if not math.isfinite(hi):
            raise CapabilityError("could not bracket inverse; function appears bounded")
    else:
        raise CapabilityError("could not bracket inverse; function appears bounded")
    lo = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if f(mid) < y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# Scalar K-functions
# ---------------------------------------------------------------------------

class KFn:
    """A scalar comparison function: continuous, strictly increasing, f(0)=0.

    Subclasses are frozen dataclasses.  ``is_unbounded`` marks membership in
    K-infinity; ``inverse`` uses a closed form where the family has one and
    bracketed bisection otherwise.
    """

    def __call__(self, r: float) -> float:
        raise NotImplementedError

    @property
    def is_unbounded(self) -> bool:
        raise NotImplementedError

    def inverse(self, y: float) -> float:
        if not self.is_unbounded:
            raise CapabilityError(f"{self!r} is not K-infinity; inverse not total")
        return _bisect_inverse(self.__call__, y)

    def _check_domain(self, r: float) -> float:
        r = float(r)
        if r < 0 or math.isnan(r):
            raise DomainError(f"K-function argument must be nonnegative, got {r}")
        return r


@dataclass(frozen=True)
class LinearK(KFn):
    """f(r) = c * r with c > 0."""

    c: float

    def __post_init__(self):
        if not (self.c > 0):
            raise DomainError("LinearK needs c > 0")

    def __call__(self, r):
        return self.c * self._check_domain(r)

    @property
    def is_unbounded(self):
        return True

    def inverse(self, y):
        if y < 0:
            raise DomainError("inverse target must be nonnegative")
        return y / self.c


@dataclass(frozen=True)
class PowerK(KFn):
    """f(r) = c * r**p with c > 0, p > 0."""

    c: float
    p: float

    def __post_init__(self):
        if not (self.c > 0 and self.p > 0):
            raise DomainError("PowerK needs c > 0 and p > 0")

    def __call__(self, r):
        return self.c * self._check_domain(r) ** self.p

    @property
    def is_unbounded(self):
        return True

    def inverse(self, y):
        if y < 0:
            raise DomainError("inverse target must be nonnegative")
        return (y / self.c) ** (1.0 / self.p)


@dataclass(frozen=True)
class PiecewiseLinearK(KFn):
    """Piecewise-linear K-function through (0,0) and the given knots.

    Knots are (x, y) pairs with strictly increasing x and y; beyond the last
    knot the final segment slope is extended, so the function is K-infinity
    whenever that slope is positive.
    """

    knots: tuple

    def __post_init__(self):
        pts = tuple((float(x), float(y)) for x, y in self.knots)
        object.__setattr__(self, "knots", pts)
        xs = [0.0] + [p[0] for p in pts]
        ys = [0.0] + [p[1] for p in pts]
        if any(b <= a for a, b in zip(xs, xs[1:])) or any(b <= a for a, b in zip(ys, ys[1:])):
            raise DomainError("PiecewiseLinearK knots must be strictly increasing in x and y")

    def _segments(self):
        xs = [0.0] + [p[0] for p in self.knots]
        ys = [0.0] + [p[1] for p in self.knots]
        return xs, ys

    def __call__(self, r):
        r = self._check_domain(r)
        xs, ys = self._segments()
        for i in range(len(xs) - 1):
            if r <= xs[i + 1]:
                t = (r - xs[i]) / (xs[i + 1] - xs[i])
                return ys[i] + t * (ys[i + 1] - ys[i])
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return ys[-1] + slope * (r - xs[-1])

    @property
    def is_unbounded(self):
        xs, ys = self._segments()
        return (ys[-1] - ys[-2]) / (xs[-1] - xs[-2]) > 0

    def inverse(self, y):
        if y < 0:
            raise DomainError("inverse target must be nonnegative")
        xs, ys = self._segments()
        for i in range(len(xs) - 1):
            if y <= ys[i + 1]:
                t = (y - ys[i]) / (ys[i + 1] - ys[i])
                return xs[i] + t * (xs[i + 1] - xs[i])
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        if slope <= 0:
            raise CapabilityError("bounded piecewise-linear function has no total inverse")
        return xs[-1] + (y - ys[-1]) / slope


@dataclass(frozen=True)
class ComposedK(KFn):
    """f = parts[0] o parts[1] o ... (outermost first)."""

    parts: tuple

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DomainError("ComposedK needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    def __call__(self, r):
        v = self._check_domain(r)
        for f in reversed(self.parts):
            v = f(v)
        return v

    @property
    def is_unbounded(self):
        return all(f.is_unbounded for f in self.parts)

    def inverse(self, y):
        v = y
        for f in self.parts:
            v = f.inverse(v)
        return v


@dataclass(frozen=True)
class SumK(KFn):
    """f(r) = sum of the parts.  Used for assembled gain maps."""

    parts: tuple

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DomainError("SumK needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    def __call__(self, r):
        r = self._check_domain(r)
        return sum(f(r) for f in self.parts)

    @property
    def is_unbounded(self):
        return any(f.is_unbounded for f in self.parts)


@dataclass(frozen=True)
class IterK(KFn):
    """f(r) = kappa^n(r), the n-fold composition of a K-function."""

    kappa: KFn
    n: int

    def __post_init__(self):
        if self.n < 0:
            raise DomainError("IterK needs n >= 0")

    def __call__(self, r):
        return iterate_k(self.kappa, self.n, r)

    @property
    def is_unbounded(self):
        return self.n == 0 or self.kappa.is_unbounded

    def inverse(self, y):
        v = y
        for _ in range(self.n):
            v = self.kappa.inverse(v)
        return v


def iterate_k(kappa: KFn, n: int, r: float) -> float:
    """Apply ``kappa`` n times to r; n = 0 returns r unchanged."""
    if n < 0:
        raise DomainError("iteration count must be nonnegative")
    if isinstance(kappa, LinearK):
        return kappa.c ** n * float(r)
    v = float(r)
    for _ in range(n):
        v = kappa(v)
    return v


def k_inverse(f: KFn, y: float, tol: float = TOL_INV) -> float:
    """Invert a K-infinity function at y.

    Closed forms are used where the family has one; otherwise bracketed
    bisection to ``tol`` relative, capped at 200 iterations.  Non-K-infinity
    inputs raise :class:`CapabilityError`.
    """
    if not f.is_unbounded:
        raise CapabilityError("k_inverse requires a K-infinity function")
    if y < 0:
        raise DomainError("inverse target must be nonnegative")
    return f.inverse(y)


# ---------------------------------------------------------------------------
# Triangle growth
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriangleGrowth:
    """Nonincreasing map s -> N(s) in [1, 2] splitting beta(a1 + a2, s).

    ``values[s]`` holds N(s) for s below the stored range; the final entry is
    used for all later s.
    """

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise DomainError("TriangleGrowth needs at least one value")
        if any(not (1.0 <= v <= 2.0) for v in vals):
            raise DomainError("TriangleGrowth values must lie in [1, 2]")
        if any(b > a for a, b in zip(vals, vals[1:])):
            raise DomainError("TriangleGrowth must be nonincreasing")
        object.__setattr__(self, "values", vals)

    def __call__(self, s: int) -> float:
        s = int(s)
        if s < 0:
            raise DomainError("TriangleGrowth index must be nonnegative")
        return self.values[min(s, len(self.values) - 1)]

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1


N_ONE = TriangleGrowth((1.0,))
N_TWO = TriangleGrowth((2.0,))


# ---------------------------------------------------------------------------
# KL functions
# ---------------------------------------------------------------------------

class KLFn:
    """A two-argument comparison function: K in r for fixed s, L in s for fixed r.

    Families additionally expose, where they can:

    * ``r_slope(s)`` -- the coefficient of r if the s-slice is exactly linear,
      else None.  The structured solvers key off this.
    * ``r_inverse(y, s)`` -- inverse of the s-slice.
    * ``sum_tail(r, start)`` -- an analytic upper bound on the tail
      sum_{tau >= start} f(r, tau); raises :class:`CapabilityError` when the
      family has no analytic tail.
    """

    def __call__(self, r: float, s: int) -> float:
        raise NotImplementedError

    def r_slope(self, s: int) -> Optional[float]:
        return None

    def r_inverse(self, y: float, s: int) -> float:
        if y < 0:
            raise DomainError("inverse target must be nonnegative")
        if y == 0:
            return 0.0
        return _bisect_inverse(lambda r: self(r, s), y)

    def sum_tail(self, r: float, start: int) -> float:
        raise CapabilityError(f"{type(self).__name__} has no analytic tail bound")

    def _check_args(self, r: float, s: int):
        r = float(r)
        if r < 0 or math.isnan(r):
            raise DomainError(f"KL first argument must be nonnegative, got {r}")
        s = int(s)
        if s < 0:
            raise DomainError("KL second argument must be a nonnegative integer")
        return r, s


@dataclass(frozen=True)
class SeparableGeometric(KLFn):
    """f(r, s) = c * lam**s * r**p with c >= 0, p > 0, 0 <= lam < 1."""

    c: float
    p: float
    lam: float

    def __post_init__(self):
        if self.c < 0 or not (self.p > 0) or not (0.0 <= self.lam < 1.0):
            raise DomainError("SeparableGeometric needs c >= 0, p > 0, 0 <= lam < 1")

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return self.c * self.lam ** s * r ** self.p

    def r_slope(self, s):
        if self.p == 1.0:
            return self.c * self.lam ** s
        return None

    def r_inverse(self, y, s):
        if y < 0:
            raise DomainError("inverse target must be nonnegative")
        coef = self.c * self.lam ** s
        if coef == 0.0:
            raise CapabilityError("zero slice has no inverse")
        return (y / coef) ** (1.0 / self.p)

    def sum_tail(self, r, start):
        # sum_{tau >= start} c lam^tau r^p = c r^p lam^start / (1 - lam)
        r, start = self._check_args(r, start)
        return self.c * r ** self.p * self.lam ** start / (1.0 - self.lam)


@dataclass(frozen=True)
class ScaledShiftKL(KLFn):
    """f(r, s) = out_scale * base(scale(s) * r, s + s_shift).

    ``r_scale`` is either a constant or a :class:`TriangleGrowth`; the latter
    is what cost functions built from a certificate use, since the triangle
    constant may vary with s.
    """

    base: KLFn
    r_scale: Union[float, TriangleGrowth] = 1.0
    s_shift: int = 0
    out_scale: float = 1.0

    def __post_init__(self):
        if self.s_shift < 0:
            raise DomainError("s_shift must be nonnegative")
        if self.out_scale < 0:
            raise DomainError("out_scale must be nonnegative")
        if isinstance(self.r_scale, (int, float)) and not (self.r_scale > 0):
            raise DomainError("r_scale must be positive")

    def scale_at(self, s: int) -> float:
        if isinstance(self.r_scale, TriangleGrowth):
            return self.r_scale(s)
        return float(self.r_scale)

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return self.out_scale * self.base(self.scale_at(s) * r, s + self.s_shift)

    def r_slope(self, s):
        inner = self.base.r_slope(s + self.s_shift)
        if inner is None:
            return None
        return self.out_scale * self.scale_at(s) * inner

    def r_inverse(self, y, s):
        if self.out_scale == 0.0:
            raise CapabilityError("zero slice has no inverse")
        return self.base.r_inverse(y / self.out_scale, s + self.s_shift) / self.scale_at(s)

    def sum_tail(self, r, start):
        # r_scale is nonincreasing in s, so scaling by its value at the tail
        # start bounds every later term.
        r, start = self._check_args(r, start)
        return self.out_scale * self.base.sum_tail(self.scale_at(start) * r, start + self.s_shift)


@dataclass(frozen=True)
class PointwiseMaxKL(KLFn):
    """f = max of the parts, pointwise."""

    parts: tuple

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DomainError("PointwiseMaxKL needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return max(f(r, s) for f in self.parts)

    def r_slope(self, s):
        slopes = [f.r_slope(s) for f in self.parts]
        if any(sl is None for sl in slopes):
            return None
        return max(slopes)

    def r_inverse(self, y, s):
        # (max f_i)^{-1} = min f_i^{-1} for increasing slices
        return min(f.r_inverse(y, s) for f in self.parts)

    def sum_tail(self, r, start):
        return sum(f.sum_tail(r, start) for f in self.parts)


@dataclass(frozen=True)
class PointwiseSumKL(KLFn):
    """f = sum of the parts, pointwise."""

    parts: tuple

    def __post_init__(self):
        if len(self.parts) < 1:
            raise DomainError("PointwiseSumKL needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return sum(f(r, s) for f in self.parts)

    def r_slope(self, s):
        slopes = [f.r_slope(s) for f in self.parts]
        if any(sl is None for sl in slopes):
            return None
        return sum(slopes)

    def sum_tail(self, r, start):
        return sum(f.sum_tail(r, start) for f in self.parts)


@dataclass(frozen=True)
class IteratedKL(KLFn):
    """f(r, s) = kappa^s(sigma(r)) for K-functions kappa, sigma.

    Valid as a KL-function when kappa is a contraction on the relevant range;
    the grid checks verify that rather than trusting the constructor.
    """

    kappa: KFn
    sigma: KFn

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return iterate_k(self.kappa, s, self.sigma(r))

    def r_slope(self, s):
        if isinstance(self.kappa, LinearK) and isinstance(self.sigma, LinearK):
            return self.kappa.c ** s * self.sigma.c
        return None

    def r_inverse(self, y, s):
        v = y
        for _ in range(int(s)):
            v = self.kappa.inverse(v)
        return self.sigma.inverse(v)

    def sum_tail(self, r, start):
        r, start = self._check_args(r, start)
        if isinstance(self.kappa, LinearK) and self.kappa.c < 1.0:
            return self.sigma(r) * self.kappa.c ** start / (1.0 - self.kappa.c)
        raise CapabilityError("IteratedKL tail bound needs a linear contraction")


@dataclass(frozen=True)
class KOfKL(KLFn):
    """f(r, s) = outer(inner(r, s)) for a K-function outer."""

    outer: KFn
    inner: KLFn

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return self.outer(self.inner(r, s))

    def r_slope(self, s):
        if isinstance(self.outer, LinearK):
            inner = self.inner.r_slope(s)
            if inner is not None:
                return self.outer.c * inner
        return None

    def r_inverse(self, y, s):
        return self.inner.r_inverse(self.outer.inverse(y), s)

    def sum_tail(self, r, start):
        if isinstance(self.outer, LinearK):
            return self.outer.c * self.inner.sum_tail(r, start)
        raise CapabilityError("KOfKL tail bound needs a linear outer function")


@dataclass(frozen=True)
class SFloorKL(KLFn):
    """f(r, s) = base(r, s // divisor): slows the decay by an integer factor."""

    base: KLFn
    divisor: int

    def __post_init__(self):
        if self.divisor < 1:
            raise DomainError("divisor must be >= 1")

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        return self.base(r, s // self.divisor)

    def r_slope(self, s):
        return self.base.r_slope(int(s) // self.divisor)

    def r_inverse(self, y, s):
        return self.base.r_inverse(y, int(s) // self.divisor)

    def sum_tail(self, r, start):
        r, start = self._check_args(r, start)
        m = start // self.divisor
        return self.divisor * (self.base(r, m) + self.base.sum_tail(r, m + 1))


@dataclass(frozen=True, eq=False)
class TabulatedKL(KLFn):
    """Grid-sampled KL function with bilinear interpolation in (log r, s).

    Carries no analytic structure: summability checks reject it and inverses
    fall back to bisection.  Exists so externally fitted gains can still be
    evaluated and grid-checked.
    """

    r_grid: np.ndarray
    s_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_grid, dtype=float)
        s = np.asarray(self.s_grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(r), len(s)):
            raise DomainError("TabulatedKL values must be (len(r_grid), len(s_grid))")
        object.__setattr__(self, "r_grid", r)
        object.__setattr__(self, "s_grid", s)
        object.__setattr__(self, "values", v)

    def __call__(self, r, s):
        r, s = self._check_args(r, s)
        if r == 0.0:
            return 0.0
        ri = np.clip(np.searchsorted(self.r_grid, r), 1, len(self.r_grid) - 1)
        si = np.clip(np.searchsorted(self.s_grid, s), 1, len(self.s_grid) - 1)
        r0, r1 = self.r_grid[ri - 1], self.r_grid[ri]
        s0, s1 = self.s_grid[si - 1], self.s_grid[si]
        tr = 0.0 if r1 == r0 else (min(max(r, r0), r1) - r0) / (r1 - r0)
        ts = 0.0 if s1 == s0 else (min(max(s, s0), s1) - s0) / (s1 - s0)
        v00 = self.values[ri - 1, si - 1]
        v10 = self.values[ri, si - 1]
        v01 = self.values[ri - 1, si]
        v11 = self.values[ri, si]
        return (1 - tr) * (1 - ts) * v00 + tr * (1 - ts) * v10 + (1 - tr) * ts * v01 + tr * ts * v11


# ---------------------------------------------------------------------------
# Grid evidence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridEvidence:
    """Outcome of a grid-based inequality check, with the worst point kept so
    failures are reproducible."""

    passed: bool
    worst_margin: float
    worst_point: tuple
    description: str
    r_range: tuple = (GRID_R_MIN, GRID_R_MAX)

    def __bool__(self):
        return self.passed


def check_k_on_grid(f: KFn, r_grid: Optional[np.ndarray] = None,
                    probe_unbounded: bool = False) -> GridEvidence:
    """Verify f(0) = 0, strict increase, and continuity proxies on a log grid."""
    grid = log_grid() if r_grid is None else np.asarray(r_grid, dtype=float)
    if f(0.0) != 0.0:
        return GridEvidence(False, -abs(f(0.0)), (0.0,), "f(0) != 0")
    vals = np.array([f(r) for r in grid])
    diffs = np.diff(vals)
    worst = float(diffs.min()) if len(diffs) else 0.0
    if worst <= 0.0:
        idx = int(np.argmin(diffs))
        return GridEvidence(False, worst, (float(grid[idx]),), "not strictly increasing")
    if probe_unbounded:
        probe = f(1e12)
        if probe <= vals[-1]:
            return GridEvidence(False, probe - vals[-1], (1e12,), "unboundedness probe failed")
    return GridEvidence(True, worst, (float(grid[int(np.argmin(diffs))]),), "K grid checks passed")


def check_kl_on_grid(f: KLFn, r_grid: Optional[np.ndarray] = None,
                     s_max: int = 64, rel_tol: float = 1e-9) -> GridEvidence:
    """Verify KL membership on a grid: K in r per slice, nonincreasing in s.

    The limit-to-zero requirement is testable only up to the horizon bound;
    the terminal ratio f(r, s_max) / f(r, 0) is folded into the description.
    """
    grid = log_grid() if r_grid is None else np.asarray(r_grid, dtype=float)
    worst = math.inf
    worst_pt = (0.0, 0)
    terminal = 0.0
    for s in range(0, s_max + 1, max(1, s_max // 16)):
        vals = np.array([f(r, s) for r in grid])
        diffs = np.diff(vals)
        if len(diffs):
            m = float(diffs.min())
            if m < worst:
                worst = m
                worst_pt = (float(grid[int(np.argmin(diffs))]), s)
            if m <= 0.0:
                return GridEvidence(False, m, worst_pt, f"slice s={s} not strictly increasing in r")
    for r in grid[:: max(1, len(grid) // 16)]:
        prev = f(r, 0)
        for s in range(1, s_max + 1):
            cur = f(r, s)
            if cur > prev * (1 + rel_tol) + 1e-300:
                return GridEvidence(False, prev - cur, (float(r), s), "not nonincreasing in s")
            prev = cur
        base = f(r, 0)
        if base > 0:
            terminal = max(terminal, f(r, s_max) / base)
    return GridEvidence(True, worst, worst_pt,
                        f"KL grid checks passed; terminal decay ratio {terminal:.3e}")


@dataclass(frozen=True)
class SummabilityEvidence:
    """Record that sum_tau f(r, tau) <= sigma(r) held on a grid, with tails."""

    passed: bool
    worst_margin: float
    worst_r: float
    tail_horizon: int
    sigma: KFn
    r_range: tuple

    def __bool__(self):
        return self.passed


def check_summable(f: KLFn, sigma: KFn, r_grid: Optional[np.ndarray] = None,
                   tail_horizon: int = 256) -> SummabilityEvidence:
    """Check the summability bound sum_{tau>=0} f(r, tau) <= sigma(r).

    The partial sum to ``tail_horizon`` plus the family's analytic tail bound
    must stay below sigma on every grid point.  Families without an analytic
    tail (e.g. tabulated ones) raise :class:`CapabilityError`.
    """
    grid = log_grid() if r_grid is None else np.asarray(r_grid, dtype=float)
    worst = math.inf
    worst_r = float(grid[0])
    for r in grid:
        partial = sum(f(r, tau) for tau in range(tail_horizon + 1))
        total = partial + f.sum_tail(r, tail_horizon + 1)
        cap = sigma(r)
        margin = cap - total
        if margin < worst:
            worst = margin
            worst_r = float(r)
    tol = 1e-9 * max(1.0, abs(sigma(worst_r)))
    return SummabilityEvidence(worst >= -tol, worst, worst_r, tail_horizon, sigma,
                               (float(grid[0]), float(grid[-1])))


def kl_eval(f: KLFn, r: float, s: int) -> float:
    """Evaluate a KL function; negative r is a domain error."""
    return f(r, s)


def triangle_constant(beta: KLFn, mode: PlusMode, s_max: int = 32,
                      a_grid: Optional[np.ndarray] = None,
                      candidates: Sequence[float] = (1.0, 2.0),
                      rel_tol: float = 1e-9) -> TriangleGrowth:
    """Find the smallest triangle-growth map N(s) from a finite candidate set.

    For every s the smallest candidate N satisfying

        beta(a1 + a2, s) <= beta(N a1, s) (+) beta(N a2, s)

    on the probe grid is kept, then the map is repaired to be nonincreasing
    (larger N is always admissible).  N = 2 is guaranteed feasible, so there
    is no failure path.
    """
    grid = np.geomspace(1e-6, 1e3, 40) if a_grid is None else np.asarray(a_grid, dtype=float)
    cands = sorted(set(float(c) for c in candidates) | {2.0})
    chosen = []
    for s in range(s_max + 1):
        pick = 2.0
        for cand in cands:
            ok = True
            for a1 in grid:
                for a2 in grid:
                    lhs = beta(a1 + a2, s)
                    rhs = plus2(mode, beta(cand * a1, s), beta(cand * a2, s))
                    if lhs > rhs * (1 + rel_tol) + 1e-300:
                        ok = False
                        break
                if not ok:
                    break
            if ok:
                pick = cand
                break
        chosen.append(pick)
    # repair to nonincreasing: a larger N only weakens the split
    for s in range(s_max - 1, -1, -1):
        chosen[s] = max(chosen[s], chosen[s + 1])
    if len(set(chosen)) == 1:
        return TriangleGrowth((chosen[0],))
    return TriangleGrowth(tuple(chosen))


def check_triangle(beta: KLFn, n: TriangleGrowth, mode: PlusMode, s_max: int = 32,
                   a_grid: Optional[np.ndarray] = None, rel_tol: float = 1e-9) -> GridEvidence:
    """Grid evidence for the triangle-growth inequality with a given N."""
    grid = np.geomspace(1e-6, 1e3, 40) if a_grid is None else np.asarray(a_grid, dtype=float)
    worst = math.inf
    worst_pt = (0.0, 0.0, 0)
    for s in range(s_max + 1):
        for a1 in grid:
            for a2 in grid:
                lhs = beta(a1 + a2, s)
                rhs = plus2(mode, beta(n(s) * a1, s), beta(n(s) * a2, s))
                margin = rhs - lhs
                scale = max(1.0, abs(rhs))
                if margin / scale < worst:
                    worst = margin / scale
                    worst_pt = (float(a1), float(a2), s)
    return GridEvidence(worst >= -rel_tol, worst, worst_pt, "triangle-growth inequality",
                        (float(grid[0]), float(grid[-1])))


# ---------------------------------------------------------------------------
# Serialization: declarative text format used inside harness config files
# ---------------------------------------------------------------------------

def format_kfn(f: KFn) -> str:
    if isinstance(f, LinearK):
        return f"linear({f.c!r})"
    if isinstance(f, PowerK):
        return f"power({f.c!r}, {f.p!r})"
    if isinstance(f, PiecewiseLinearK):
        pts = ", ".join(f"{x!r}:{y!r}" for x, y in f.knots)
        return f"pwl({pts})"
    if isinstance(f, ComposedK):
        return "comp(" + ", ".join(format_kfn(p) for p in f.parts) + ")"
    if isinstance(f, SumK):
        return "ksum(" + ", ".join(format_kfn(p) for p in f.parts) + ")"
    if isinstance(f, IterK):
        return f"kiter({format_kfn(f.kappa)}, {f.n})"
    raise CapabilityError(f"no text form for {type(f).__name__}")


def format_klfn(f: KLFn) -> str:
    if isinstance(f, SeparableGeometric):
        return f"sepgeo({f.c!r}, {f.p!r}, {f.lam!r})"
    if isinstance(f, ScaledShiftKL):
        if isinstance(f.r_scale, TriangleGrowth):
            scale = "tria(" + ", ".join(repr(v) for v in f.r_scale.values) + ")"
        else:
            scale = repr(f.r_scale)
        return f"scaled({format_klfn(f.base)}, {scale}, {f.s_shift}, {f.out_scale!r})"
    if isinstance(f, PointwiseMaxKL):
        return "klmax(" + ", ".join(format_klfn(p) for p in f.parts) + ")"
    if isinstance(f, PointwiseSumKL):
        return "klsum(" + ", ".join(format_klfn(p) for p in f.parts) + ")"
    if isinstance(f, IteratedKL):
        return f"kliter({format_kfn(f.kappa)}, {format_kfn(f.sigma)})"
    if isinstance(f, KOfKL):
        return f"kofkl({format_kfn(f.outer)}, {format_klfn(f.inner)})"
    if isinstance(f, SFloorKL):
        return f"sfloor({format_klfn(f.base)}, {f.divisor})"
    raise CapabilityError(f"no text form for {type(f).__name__}")


_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|[(),:]|[-+]?[0-9.eE+-]+)")


class _Parser:
    def __init__(self, text: str):
        self.tokens = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if not m:
                if text[pos:].strip():
                    raise DomainError(f"cannot tokenize comparison function: {text[pos:]!r}")
                break
            self.tokens.append(m.group(1))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        if tok is None:
            raise DomainError("unexpected end of comparison-function text")
        self.i += 1
        return tok

    def expect(self, tok):
        got = self.next()
        if got != tok:
            raise DomainError(f"expected {tok!r}, got {got!r}")

    def number(self):
        return float(self.next())

    def args(self):
        self.expect("(")
        out = []
        if self.peek() == ")":
            self.next()
            return out
        while True:
            out.append(self.value())
            tok = self.next()
            if tok == ")":
                return out
            if tok != ",":
                raise DomainError(f"expected ',' or ')', got {tok!r}")

    def value(self):
        tok = self.peek()
        if tok is None:
            raise DomainError("unexpected end of comparison-function text")
        if re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", tok):
            name = self.next().lower()
            args = self.args()
            return (name, args)
        v = self.number()
        if self.peek() == ":":
            self.next()
            return (v, self.number())
        return v


def _build_kfn(node) -> KFn:
    if not isinstance(node, tuple) or not isinstance(node[0], str):
        raise DomainError(f"expected a K-function expression, got {node!r}")
    name, args = node
    if name == "linear":
        return LinearK(args[0])
    if name == "power":
        return PowerK(args[0], args[1])
    if name == "pwl":
        return PiecewiseLinearK(tuple(args))
    if name == "comp":
        return ComposedK(tuple(_build_kfn(a) for a in args))
    if name == "ksum":
        return SumK(tuple(_build_kfn(a) for a in args))
    if name == "kiter":
        return IterK(_build_kfn(args[0]), int(args[1]))
    raise DomainError(f"unknown K-function family {name!r}")


def _build_klfn(node) -> KLFn:
    if not isinstance(node, tuple) or not isinstance(node[0], str):
        raise DomainError(f"expected a KL-function expression, got {node!r}")
    name, args = node
    if name == "sepgeo":
        return SeparableGeometric(args[0], args[1], args[2])
    if name == "scaled":
        base = _build_klfn(args[0])
        scale = args[1]
        if isinstance(scale, tuple) and scale[0] == "tria":
            scale = TriangleGrowth(tuple(scale[1]))
        s_shift = int(args[2]) if len(args) > 2 else 0
        out_scale = float(args[3]) if len(args) > 3 else 1.0
        return ScaledShiftKL(base, scale, s_shift, out_scale)
    if name == "klmax":
        return PointwiseMaxKL(tuple(_build_klfn(a) for a in args))
    if name == "klsum":
        return PointwiseSumKL(tuple(_build_klfn(a) for a in args))
    if name == "kliter":
        return IteratedKL(_build_kfn(args[0]), _build_kfn(args[1]))
    if name == "kofkl":
        return KOfKL(_build_kfn(args[0]), _build_klfn(args[1]))
    if name == "sfloor":
        return SFloorKL(_build_klfn(args[0]), int(args[1]))
    raise DomainError(f"unknown KL-function family {name!r}")


def parse_kfn(text: str) -> KFn:
    """Parse the declarative text form of a scalar K-function."""
    return _build_kfn(_Parser(text).value())


def parse_klfn(text: str) -> KLFn:
    """Parse the declarative text form of a KL function."""
    return _build_klfn(_Parser(text).value())
