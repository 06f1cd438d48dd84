"""Window estimators: cost evaluation, the window solve, and the full- and
moving-horizon drivers.

The optimization problem is always the same shape: pick an initial window
state and a process-disturbance sequence, roll the dynamics forward, read the
measurement residuals off the output equations, and score everything with the
discounted stage cost.  Measurement-noise variables are eliminated exactly
whenever the output map is additive in the noise (all built-in plants), so
window solutions satisfy the solution-set constraint to rounding error.

Three engines back ``solve_window``:

* max-mode costs on scalar plants are solved by bisection on the achievable
  cost level; the feasible set at a level is an interval propagated through
  exact interval images of the transition map, so the solve is exact up to
  the bisection resolution,
* sum-mode costs with stage terms linear in the residual magnitude on scalar
  affine plants reduce to a chain of infimal convolutions of convex
  piecewise-linear value functions, which is solved exactly,
* everything else goes through the configured iterative method: a damped
  Gauss-Newton on smoothed residuals with escalating output penalties, or a
  deterministic multistart compass search.

The structured engines are fast paths used by both configured methods; they
exist because the acceptance sweeps solve tens of thousands of windows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .comparison import CapabilityError, DomainError, PlusMode, plus_reduce
from .certificates import CostSpec
from .systems import SolutionTuple, SystemModel, verify_solution

WIDTH_CAP = 1e18


_SLOPE_TABLES: dict = {}


def slope_table(fn, s_max: int) -> Optional[np.ndarray]:
    """Slopes of the linear-in-r slices fn(., s) for s = 0..s_max, or None if
    any slice is not exactly linear.

    Keyed by object identity with the function kept alive in the cache entry,
    so a recycled id can never alias a different function.
    """
    key = (id(fn), s_max)
    hit = _SLOPE_TABLES.get(key)
    if hit is not None and hit[0] is fn:
        return hit[1]
    slopes = [fn.r_slope(s) for s in range(s_max + 1)]
    table = None if any(s is None for s in slopes) else np.asarray(slopes, dtype=float)
    if len(_SLOPE_TABLES) > 4096:
        _SLOPE_TABLES.clear()
    _SLOPE_TABLES[key] = (fn, table)
    return table


def cached_slope(fn, s: int):
    table = slope_table(fn, s)
    return fn.r_slope(s) if table is None else float(table[s])


def seq_norms(arr: np.ndarray) -> np.ndarray:
    """Euclidean norms of the rows of a (K, d) array."""
    if arr.shape[1] == 1:
        return np.abs(arr[:, 0])
    return np.sqrt(np.einsum("ij,ij->i", arr, arr))


class HorizonCapError(RuntimeError):
    """Requested full-information horizon exceeds the configured cap."""


class InfeasibleWindowError(RuntimeError):
    """No trajectory satisfies the window constraints (box bounds conflict)."""


@dataclass(frozen=True)
class BoxBounds:
    """Optional per-variable boxes; each entry is (lo, hi) arrays or None."""

    chi: Optional[Tuple[np.ndarray, np.ndarray]] = None
    omega: Optional[Tuple[np.ndarray, np.ndarray]] = None
    nu: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def empty(self) -> bool:
        return self.chi is None and self.omega is None and self.nu is None


@dataclass(frozen=True, eq=False)
class EstimationProblem:
    model: SystemModel
    cost: CostSpec
    prior: np.ndarray
    u_win: np.ndarray
    y_win: np.ndarray
    horizon: int
    a_factor: float = 1.0
    bounds: Optional[BoxBounds] = None

    def __post_init__(self):
        object.__setattr__(self, "prior", np.atleast_1d(np.asarray(self.prior, dtype=float)))
        u = np.asarray(self.u_win, dtype=float)
        y = np.asarray(self.y_win, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]
        object.__setattr__(self, "u_win", u)
        object.__setattr__(self, "y_win", y)
        if self.horizon < 1:
            raise DomainError("window horizon must be >= 1")
        if len(u) != self.horizon or len(y) != self.horizon:
            raise DomainError("window sequences must have length equal to the horizon")
        if self.a_factor < 1.0:
            raise DomainError("suboptimality factor must be >= 1")


@dataclass(eq=False)
class EstimateResult:
    xhat: np.ndarray      # (K+1, n) window states including the published endpoint
    what: np.ndarray      # (K, q)
    vhat: np.ndarray      # (K, m)
    cost: float
    status: str
    engine: str
    prior: np.ndarray
    horizon: int
    iterations: int = 0
    residual: float = 0.0
    starts_used: int = 1

    @property
    def published(self) -> np.ndarray:
        return self.xhat[-1]

    def as_solution(self, model: SystemModel, u_win: np.ndarray) -> SolutionTuple:
        """The window part of the estimate as a solution tuple (reproduces the
        measured outputs through the estimated measurement noise)."""
        ys = np.array([np.atleast_1d(model.h(self.xhat[j], u_win[j], self.vhat[j]))
                       for j in range(self.horizon)])
        return SolutionTuple(self.xhat[:-1], u_win, self.what, self.vhat, ys)


@dataclass(frozen=True)
class SolverConfig:
    """Deterministic solver settings.

    ``use_structured`` lets both methods take the exact scalar engines when
    the window has the right shape; switching it off forces the generic
    iteration, which the tests use to cross-check the fast paths.
    """

    method: str = "gauss_newton_penalty"
    multistart: int = 4
    max_iter: int = 60
    penalty_schedule: Tuple[float, ...] = (1e2, 1e4, 1e6, 1e8)
    tol: float = 1e-10
    seed: int = 0
    use_structured: bool = True
    level_passes: int = 4

    METHODS = ("gauss_newton_penalty", "multistart_local")

    def __post_init__(self):
        if self.method not in self.METHODS:
            raise DomainError(f"unknown solver method {self.method!r}")


@dataclass(frozen=True)
class CertificationRecord:
    passed: bool
    ratio: float
    achieved: float
    reference: float

    def __bool__(self):
        return self.passed


# ---------------------------------------------------------------------------
# Cost evaluation
# ---------------------------------------------------------------------------

def eval_cost(cost: CostSpec, prior, chi0, omega_seq, nu_seq) -> float:
    """Discounted window cost of a candidate (initial state, disturbances).

    Window sequences are in time order: entry j of ``omega_seq`` acts at age
    K - j, the prior mismatch is discounted by the full window length K.
    """
    prior = np.atleast_1d(np.asarray(prior, dtype=float))
    chi0 = np.atleast_1d(np.asarray(chi0, dtype=float))
    omega = np.asarray(omega_seq, dtype=float)
    nu = np.asarray(nu_seq, dtype=float)
    if omega.ndim == 1:
        omega = omega[:, None]
    if nu.ndim == 1:
        nu = nu[:, None]
    if len(omega) != len(nu):
        raise DomainError("omega and nu sequences must share the window length")
    K = len(omega)
    if K < 1:
        raise DomainError("window must contain at least one step")
    prior_dist = float(np.linalg.norm(chi0 - prior))
    b_table = slope_table(cost.beta_hat, K)
    g_table = slope_table(cost.gamma_hat, K)
    d_table = slope_table(cost.delta_hat, K)
    if b_table is not None and g_table is not None and d_table is not None:
        wn = seq_norms(omega)
        vn = seq_norms(nu)
        gterms = g_table[K:0:-1] * wn      # entry j acts at age K - j
        dterms = d_table[K:0:-1] * vn
        if cost.mode is PlusMode.SUM:
            return b_table[K] * prior_dist + float(gterms.sum() + dterms.sum())
        return max(b_table[K] * prior_dist, float(gterms.max()), float(dterms.max()))
    terms = [cost.beta_hat(prior_dist, K)]
    for j in range(K):
        age = K - j
        terms.append(cost.gamma_hat(float(np.linalg.norm(omega[j])), age))
        terms.append(cost.delta_hat(float(np.linalg.norm(nu[j])), age))
    return plus_reduce(cost.mode, terms)


def _cost_terms(problem: EstimationProblem, chi0: np.ndarray, omega: np.ndarray,
                nu: np.ndarray) -> np.ndarray:
    cost, K = problem.cost, problem.horizon
    vals = [cost.beta_hat(float(np.linalg.norm(chi0 - problem.prior)), K)]
    for j in range(K):
        age = K - j
        vals.append(cost.gamma_hat(float(np.linalg.norm(omega[j])), age))
        vals.append(cost.delta_hat(float(np.linalg.norm(nu[j])), age))
    return np.array(vals)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _rollout(problem: EstimationProblem, chi0: np.ndarray, omega: np.ndarray
             ) -> Tuple[np.ndarray, np.ndarray]:
    """States (K, n) from chi0 under omega, plus the one-step endpoint."""
    model, K = problem.model, problem.horizon
    xs = np.empty((K, model.state_dim))
    x = np.atleast_1d(chi0).astype(float)
    for j in range(K):
        xs[j] = x
        x = np.atleast_1d(model.f(x, problem.u_win[j], omega[j]))
    return xs, x


def _eliminated_nu(problem: EstimationProblem, xs: np.ndarray) -> np.ndarray:
    model, K = problem.model, problem.horizon
    nu = np.empty((K, model.meas_noise_dim))
    for j in range(K):
        nu[j] = problem.y_win[j] - np.atleast_1d(model.h_nominal(xs[j], problem.u_win[j]))
    return nu


def _candidate_starts(problem: EstimationProblem) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Deterministic initializations: prior rollout, then an output-informed
    start when the plant is scalar with additive measurement noise."""
    model, K = problem.model, problem.horizon
    starts = [(problem.prior.copy(), np.zeros((K, model.process_noise_dim)))]
    if model.is_scalar and model.additive_v and model.additive_w:
        y = problem.y_win[:, 0]
        omega = np.zeros((K, 1))
        for j in range(K - 1):
            pred = float(np.atleast_1d(model.f_nominal(np.array([y[j]]), problem.u_win[j]))[0])
            omega[j, 0] = y[j + 1] - pred
        starts.append((np.array([y[0]]), omega))
    return starts


def _result_from_decisions(problem: EstimationProblem, chi0, omega, engine: str,
                           iterations: int = 0, starts_used: int = 1) -> EstimateResult:
    # dynamics hold exactly by construction (states rolled forward, noise read
    # off the transitions); the residual field records output mismatch only,
    # which elimination makes zero
    xs, endpoint = _rollout(problem, np.atleast_1d(chi0), omega)
    nu = _eliminated_nu(problem, xs)
    j_val = eval_cost(problem.cost, problem.prior, xs[0], omega, nu)
    xhat = np.vstack([xs, endpoint[None, :]])
    return EstimateResult(xhat, np.asarray(omega, dtype=float), nu, j_val, "ok", engine,
                          problem.prior.copy(), problem.horizon,
                          iterations=iterations, starts_used=starts_used)


# ---------------------------------------------------------------------------
# Engine A: max-mode level bisection on scalar plants
# ---------------------------------------------------------------------------

class _WidthTable:
    """Per-age halfwidth evaluator fn(., age)^{-1}(level), slope-cached.

    Linear slices use a vectorized inverse-slope product; general slices fall
    back to per-level inversion.  Widths are capped: a deeply discounted term
    is effectively unconstrained at any respectable level.
    """

    def __init__(self, fn, ages: Sequence[int]):
        self.fn = fn
        self.ages = list(ages)
        table = slope_table(fn, max(ages))
        if table is not None and np.all(table[list(ages)] > 0):
            self.inv = 1.0 / table[list(ages)]
        else:
            self.inv = None

    def widths(self, levels: np.ndarray) -> np.ndarray:
        if self.inv is not None:
            return np.minimum(self.inv[:, None] * levels[None, :], WIDTH_CAP)
        out = np.empty((len(self.ages), len(levels)))
        for i, age in enumerate(self.ages):
            for l, lev in enumerate(levels):
                if lev <= 0.0:
                    out[i, l] = 0.0
                    continue
                try:
                    out[i, l] = min(self.fn.r_inverse(lev, age), WIDTH_CAP)
                except CapabilityError:
                    out[i, l] = WIDTH_CAP
        return out


def _box_interval(box, idx=0):
    if box is None:
        return -math.inf, math.inf
    lo, hi = box
    return float(np.atleast_1d(lo)[idx]), float(np.atleast_1d(hi)[idx])


def _max_prepare(problem: EstimationProblem):
    ages = list(range(problem.horizon, 0, -1))
    return (_WidthTable(problem.cost.beta_hat, [problem.horizon]),
            _WidthTable(problem.cost.delta_hat, ages),
            _WidthTable(problem.cost.gamma_hat, ages))


def _max_feasible(problem: EstimationProblem, prep, levels: np.ndarray, record: bool = False):
    """Interval-propagation feasibility of `max cost <= level` per level.

    Once an interval goes empty its level stays dead through the latched
    ``alive`` mask; the interval values themselves keep propagating (they stay
    finite because widths are capped) and are ignored.
    """
    model, K = problem.model, problem.horizon
    y = problem.y_win[:, 0]
    prior = float(problem.prior[0])
    pw = prep[0].widths(levels)[0]
    dw = prep[1].widths(levels)
    gw = prep[2].widths(levels)
    bounds = problem.bounds or BoxBounds()
    boxed = not bounds.empty
    chi_lo, chi_hi = _box_interval(bounds.chi)
    om_lo, om_hi = _box_interval(bounds.omega)
    nu_lo, nu_hi = _box_interval(bounds.nu)
    if boxed:
        w_hi = dw if nu_hi == math.inf else np.minimum(dw, nu_hi)
        w_lo = dw if nu_lo == -math.inf else np.minimum(dw, -nu_lo)
        ylo = y[:, None] - w_hi
        yhi = y[:, None] + w_lo
    else:
        ylo = y[:, None] - dw
        yhi = y[:, None] + dw
    lo = np.maximum(prior - pw, chi_lo) if boxed else prior - pw
    hi = np.minimum(prior + pw, chi_hi) if boxed else prior + pw
    alive = np.ones(len(levels), dtype=bool)
    intervals = []
    for j in range(K):
        lo = np.maximum(lo, ylo[j])
        hi = np.minimum(hi, yhi[j])
        if boxed:
            lo = np.maximum(lo, chi_lo)
            hi = np.minimum(hi, chi_hi)
        alive &= lo <= hi
        if record:
            safe_lo = np.where(alive, lo, 0.0)
            safe_hi = np.where(alive, hi, 0.0)
            intervals.append((safe_lo, safe_hi))
            lo, hi = safe_lo, safe_hi
        if j < K - 1:
            img_lo, img_hi = model.f_image(lo, hi, problem.u_win[j])
            if boxed:
                lo = img_lo + np.maximum(-gw[j], om_lo)
                hi = img_hi + np.minimum(gw[j], om_hi)
            else:
                lo = img_lo - gw[j]
                hi = img_hi + gw[j]
    return (alive, intervals) if record else (alive, None)


def _max_reconstruct(problem: EstimationProblem, prep, level: float) -> Optional[EstimateResult]:
    """Build a feasible trajectory at the given cost level, or None."""
    model, K = problem.model, problem.horizon
    levels = np.array([level])
    alive, intervals = _max_feasible(problem, prep, levels, record=True)
    if not alive[0]:
        return None
    gw = prep[2].widths(levels)[:, 0]
    chis = np.empty(K)
    lo_K, hi_K = intervals[K - 1][0][0], intervals[K - 1][1][0]
    chis[K - 1] = 0.5 * (lo_K + hi_K)
    for j in range(K - 2, -1, -1):
        lo_j, hi_j = intervals[j][0][0], intervals[j][1][0]
        img_lo, img_hi = model.f_image(lo_j, hi_j, problem.u_win[j])
        target = min(max(chis[j + 1], img_lo - gw[j]), img_hi + gw[j])
        c = min(max(target, img_lo), img_hi)
        chis[j] = model.f_solve(c, lo_j, hi_j, problem.u_win[j])
    omega = np.zeros((K, 1))
    for j in range(K - 1):
        pred = float(np.atleast_1d(model.f_nominal(np.array([chis[j]]), problem.u_win[j]))[0])
        omega[j, 0] = chis[j + 1] - pred
    return _result_from_decisions(problem, np.array([chis[0]]), omega, "max-interval")


def _solve_max_scalar(problem: EstimationProblem, cfg: SolverConfig) -> EstimateResult:
    prep = _max_prepare(problem)
    # guaranteed-feasible upper bracket from candidate trajectories
    s_hi = math.inf
    for chi0, omega in _candidate_starts(problem):
        xs, _ = _rollout(problem, chi0, omega)
        nu = _eliminated_nu(problem, xs)
        val = eval_cost(problem.cost, problem.prior, chi0, omega, nu)
        if math.isfinite(val):
            s_hi = min(s_hi, val)
    boxed = problem.bounds is not None and not problem.bounds.empty
    if boxed:
        probe = max(1.0, 0.0 if not math.isfinite(s_hi) else s_hi)
        while not _max_feasible(problem, prep, np.array([probe]))[0][0]:
            probe *= 8.0
            if probe > 1e15:
                raise InfeasibleWindowError("window constraints admit no trajectory")
        s_hi = probe
    if not math.isfinite(s_hi):
        raise InfeasibleWindowError("no finite-cost candidate trajectory")
    if s_hi == 0.0 or _max_feasible(problem, prep, np.array([0.0]))[0][0]:
        result = _max_reconstruct(problem, prep, 0.0)
        if result is not None:
            return result
    n_levels = 48
    lo = 0.0
    hi = max(s_hi, 1e-300)
    levels = np.geomspace(max(hi * 1e-14, 1e-300), hi, n_levels)
    iterations = 0
    for _ in range(max(1, cfg.level_passes)):
        mask, _ = _max_feasible(problem, prep, levels)
        iterations += 1
        if not mask[-1]:
            # numeric guard: the top level should be feasible by construction
            hi = hi * (1 + 1e-9) + 1e-300
            levels = np.linspace(lo, hi, n_levels)[1:]
            continue
        first = int(np.argmax(mask))
        hi = float(levels[first])
        lo = float(levels[first - 1]) if first > 0 else lo
        levels = np.linspace(lo, hi, n_levels)[1:]
    result = None
    bump = hi
    for _ in range(6):
        result = _max_reconstruct(problem, prep, bump)
        if result is not None:
            break
        bump = bump * (1 + 1e-9) + 1e-300
    if result is None:
        raise InfeasibleWindowError("level reconstruction failed")
    result.iterations = iterations
    return result


# ---------------------------------------------------------------------------
# Engine B: sum-mode L1 dynamic programming on scalar affine plants
# ---------------------------------------------------------------------------

class _PWL:
    """Convex piecewise-linear function.

    ``xs`` are breakpoints (ascending), ``slopes`` the segment slopes with one
    extra leading entry for the left arm, ``y0`` the value at xs[0].  Slopes
    are nondecreasing; the minimum is attained because every function built
    here includes at least one coercive absolute-value term.
    """

    __slots__ = ("xs", "slopes", "y0")

    def __init__(self, xs, slopes, y0):
        self.xs = list(xs)
        self.slopes = list(slopes)
        self.y0 = float(y0)

    @staticmethod
    def abs_term(center: float, weight: float) -> "_PWL":
        return _PWL([center], [-weight, weight], 0.0)

    def value(self, x: float) -> float:
        if x <= self.xs[0]:
            return self.y0 - self.slopes[0] * (self.xs[0] - x)
        v = self.y0
        prev = self.xs[0]
        for i in range(1, len(self.xs)):
            if x <= self.xs[i]:
                return v + self.slopes[i] * (x - prev)
            v += self.slopes[i] * (self.xs[i] - prev)
            prev = self.xs[i]
        return v + self.slopes[-1] * (x - prev)

    def add(self, other: "_PWL") -> "_PWL":
        xs = sorted(set(self.xs) | set(other.xs))
        slopes = []
        for i in range(len(xs) + 1):
            probe_left = xs[0] - 1.0 if i == 0 else xs[i - 1]
            slopes.append(self._slope_right(probe_left) + other._slope_right(probe_left))
        y0 = self.value(xs[0]) + other.value(xs[0])
        return _PWL(xs, slopes, y0)._pruned()

    def _slope_right(self, x: float) -> float:
        # slope of the segment containing points just right of x
        idx = 0
        for i, bp in enumerate(self.xs):
            if x >= bp:
                idx = i + 1
            else:
                break
        return self.slopes[idx]

    def scale_shift_arg(self, a: float, off: float) -> "_PWL":
        """W(z) = V((z - off) / a) for a != 0."""
        if a == 0.0:
            raise DomainError("argument scaling needs a nonzero coefficient")
        xs = [a * x + off for x in self.xs]
        slopes = [s / a for s in self.slopes]
        if a > 0:
            return _PWL(xs, slopes, self.value(self.xs[0]))
        xs = xs[::-1]
        slopes = slopes[::-1]
        return _PWL(xs, slopes, self.value(self.xs[-1]))

    def min(self) -> Tuple[float, float, float]:
        """(vmin, arg_lo, arg_hi) over the breakpoints; assumes the function
        is coercive, i.e. slopes[0] <= 0 <= slopes[-1]."""
        vals = [self.y0]
        v = self.y0
        for i in range(1, len(self.xs)):
            v += self.slopes[i] * (self.xs[i] - self.xs[i - 1])
            vals.append(v)
        best = min(vals)
        attain = [x for x, val in zip(self.xs, vals) if val == best]
        return best, attain[0], attain[-1]

    def infconv_abs(self, w: float) -> "_PWL":
        """Infimal convolution with w * |.| == slope clipping to [-w, w],
        anchored so values in the unclipped region are preserved."""
        vmin, arg_lo, _ = self.min()
        if w <= 0.0:
            # zero-weight stage: the stage variable is free, leaving a constant
            return _PWL([arg_lo], [0.0, 0.0], vmin)
        slopes = [min(max(s, -w), w) for s in self.slopes]
        y0 = self.value_with(slopes, arg_lo, vmin, self.xs[0])
        return _PWL(self.xs, slopes, y0)._pruned()

    def value_with(self, slopes, anchor_x: float, anchor_v: float, x: float) -> float:
        """Value at x of the function with these slopes anchored at anchor."""
        if x == anchor_x:
            return anchor_v
        v = anchor_v
        if x < anchor_x:
            cur = anchor_x
            for i in range(len(self.xs) - 1, -1, -1):
                bp = self.xs[i]
                if bp >= cur:
                    continue
                lo = max(bp, x)
                v -= slopes[i + 1] * (cur - lo)
                cur = lo
                if cur <= x:
                    return v
            return v - slopes[0] * (cur - x)
        cur = anchor_x
        for i in range(len(self.xs)):
            bp = self.xs[i]
            if bp <= cur:
                continue
            hi = min(bp, x)
            v += slopes[i] * (hi - cur)
            cur = hi
            if cur >= x:
                return v
        return v + slopes[-1] * (x - cur)

    def _pruned(self) -> "_PWL":
        xs, slopes = self.xs, self.slopes
        new_xs = []
        new_slopes = [slopes[0]]
        for i, bp in enumerate(xs):
            if slopes[i + 1] != new_slopes[-1]:
                new_xs.append(bp)
                new_slopes.append(slopes[i + 1])
        if not new_xs:
            new_xs = [xs[0]]
            new_slopes = [slopes[0], slopes[0]]
        return _PWL(new_xs, new_slopes, self.value(new_xs[0]))


def _sum_weights(problem: EstimationProblem):
    cost, K = problem.cost, problem.horizon
    b_table = slope_table(cost.beta_hat, K)
    g_table = slope_table(cost.gamma_hat, K)
    d_table = slope_table(cost.delta_hat, K)
    if b_table is None or g_table is None or d_table is None:
        return None
    ages = list(range(K, 0, -1))
    return float(b_table[K]), [float(g_table[a]) for a in ages], [float(d_table[a]) for a in ages]


def _solve_sum_scalar(problem: EstimationProblem, cfg: SolverConfig) -> EstimateResult:
    model, K = problem.model, problem.horizon
    a = float(model.linear_a)
    y = problem.y_win[:, 0]
    p_w, g_w, d_w = _sum_weights(problem)
    offs = [float(np.atleast_1d(model.f_nominal(np.zeros(1), problem.u_win[j]))[0])
            for j in range(K)]
    stages = []
    V = _PWL.abs_term(float(problem.prior[0]), p_w).add(_PWL.abs_term(y[0], d_w[0]))
    for j in range(K - 1):
        stages.append(V)
        V = V.scale_shift_arg(a, offs[j]).infconv_abs(g_w[j])
        V = V.add(_PWL.abs_term(y[j + 1], d_w[j + 1]))
    _, arg_lo, arg_hi = V.min()
    chis = np.empty(K)
    chis[K - 1] = 0.5 * (arg_lo + arg_hi) if math.isfinite(arg_lo) else arg_hi
    for j in range(K - 2, -1, -1):
        Vj = stages[j]
        kink = (chis[j + 1] - offs[j]) / a
        cands = sorted(set(Vj.xs) | {kink})
        best_x, best_v = cands[0], math.inf
        for x in cands:
            val = Vj.value(x) + g_w[j] * abs(chis[j + 1] - a * x - offs[j])
            if val < best_v - 1e-300 or (val == best_v and x < best_x):
                best_v, best_x = val, x
        chis[j] = best_x
    omega = np.zeros((K, 1))
    for j in range(K - 1):
        omega[j, 0] = chis[j + 1] - (a * chis[j] + offs[j])
    return _result_from_decisions(problem, np.array([chis[0]]), omega, "sum-pwl-dp")


# ---------------------------------------------------------------------------
# Engine C: generic iterative solvers
# ---------------------------------------------------------------------------

def _generic_objective(problem: EstimationProblem):
    model, K = problem.model, problem.horizon
    n, q = model.state_dim, model.process_noise_dim
    eliminate = model.additive_v
    m = model.meas_noise_dim

    def unpack(z):
        chi0 = z[:n]
        omega = z[n:n + K * q].reshape(K, q)
        nu = z[n + K * q:].reshape(K, m) if not eliminate else None
        return chi0, omega, nu

    def full_eval(z, penalty=0.0):
        chi0, omega, nu = unpack(z)
        xs, _ = _rollout(problem, chi0, omega)
        if eliminate:
            nu_eff = _eliminated_nu(problem, xs)
            pen = 0.0
        else:
            nu_eff = nu
            pen = 0.0
            for j in range(K):
                res = problem.y_win[j] - np.atleast_1d(model.h(xs[j], problem.u_win[j], nu[j]))
                pen += float(res @ res)
        terms = _cost_terms(problem, chi0, omega, nu_eff)
        return terms, plus_reduce(problem.cost.mode, terms) + penalty * pen, pen

    dim = n + K * q + (0 if eliminate else K * m)
    return unpack, full_eval, dim


def _generic_starts(problem: EstimationProblem, cfg: SolverConfig, dim: int) -> List[np.ndarray]:
    model, K = problem.model, problem.horizon
    n, q = model.state_dim, model.process_noise_dim
    base = []
    for chi0, omega in _candidate_starts(problem):
        z = np.zeros(dim)
        z[:n] = chi0
        z[n:n + K * q] = omega.ravel()
        base.append(z)
    gen = np.random.Generator(np.random.Philox(key=cfg.seed))
    spread = max(1.0, float(np.max(np.abs(problem.y_win))), float(np.max(np.abs(problem.prior))))
    while len(base) < max(1, cfg.multistart):
        z = base[0] + gen.normal(0.0, 0.3 * spread, dim)
        base.append(z)
    return base[: max(1, cfg.multistart)]


def _compass_minimize(fun, z0: np.ndarray, max_iter: int, tol: float) -> Tuple[np.ndarray, float, int]:
    z = z0.copy()
    best = fun(z)
    step = np.maximum(0.25, 0.1 * np.abs(z))
    iters = 0
    for _ in range(max_iter):
        improved = False
        for i in range(len(z)):
            for sgn in (1.0, -1.0):
                cand = z.copy()
                cand[i] += sgn * step[i]
                val = fun(cand)
                iters += 1
                if val < best - 1e-300:
                    z, best = cand, val
                    step[i] *= 1.6
                    improved = True
                    break
        if not improved:
            step *= 0.5
            if float(np.max(step)) < tol:
                break
    return z, best, iters


def _solve_multistart_local(problem: EstimationProblem, cfg: SolverConfig) -> EstimateResult:
    unpack, full_eval, dim = _generic_objective(problem)
    eliminate = problem.model.additive_v
    schedule = (0.0,) if eliminate else cfg.penalty_schedule

    best = None
    for idx, z0 in enumerate(_generic_starts(problem, cfg, dim)):
        z = z0
        iters = 0
        for mu in schedule:
            fun = lambda zz: full_eval(zz, mu)[1]
            z, val, it = _compass_minimize(fun, z, cfg.max_iter, cfg.tol)
            iters += it
        terms, val, pen = full_eval(z, schedule[-1])
        key = (plus_reduce(problem.cost.mode, terms), idx)
        if best is None or key < best[0]:
            best = (key, z, iters, idx)
    _, z, iters, idx = best
    chi0, omega, nu = unpack(z)
    if eliminate:
        res = _result_from_decisions(problem, chi0, omega, "compass", iters, idx + 1)
        return res
    return _penalized_result(problem, chi0, omega, nu, "compass", iters, idx + 1)


def _penalized_result(problem, chi0, omega, nu, engine, iters, starts) -> EstimateResult:
    model, K = problem.model, problem.horizon
    xs, endpoint = _rollout(problem, np.atleast_1d(chi0), omega)
    j_val = plus_reduce(problem.cost.mode, _cost_terms(problem, np.atleast_1d(chi0), omega, nu))
    xhat = np.vstack([xs, endpoint[None, :]])
    res = EstimateResult(xhat, np.asarray(omega, float), np.asarray(nu, float), j_val,
                         "ok", engine, problem.prior.copy(), K,
                         iterations=iters, starts_used=starts)
    worst = 0.0
    for j in range(K):
        out = np.atleast_1d(model.h(xs[j], problem.u_win[j], nu[j]))
        worst = max(worst, float(np.linalg.norm(problem.y_win[j] - out)))
    res.residual = worst
    if worst > 1e-6:
        res.status = "penalty-residual"
    return res


def _solve_gauss_newton(problem: EstimationProblem, cfg: SolverConfig) -> EstimateResult:
    """Damped Gauss-Newton on smoothed residuals.

    Sum-mode costs are minimized directly via sqrt-term residuals (so the
    squared residual norm is the cost); max-mode costs go through escalating
    power-mean surrogates, which squeeze the iterate toward the minimax point,
    with the true max cost reported.  Output equations enter as escalating
    quadratic penalties when measurement noise cannot be eliminated.
    """
    unpack, full_eval, dim = _generic_objective(problem)
    eliminate = problem.model.additive_v
    powers = (1.0,) if problem.cost.mode is PlusMode.SUM else (2.0, 8.0)
    eps = 1e-12

    def residuals(z, power, mu):
        terms, _, pen = full_eval(z, 0.0)
        vec = np.sqrt(np.power(terms + eps, power))
        if not eliminate:
            vec = np.concatenate([vec, [math.sqrt(mu * pen + eps)]])
        return vec

    best = None
    schedule = (0.0,) if eliminate else cfg.penalty_schedule
    for idx, z0 in enumerate(_generic_starts(problem, cfg, dim)):
        z = z0.astype(float)
        iters = 0
        for mu in schedule:
            for power in powers:
                for _ in range(cfg.max_iter):
                    r = residuals(z, power, mu)
                    f0 = float(r @ r)
                    jac = np.empty((len(r), dim))
                    h = 1e-6 * np.maximum(1.0, np.abs(z))
                    for i in range(dim):
                        zp = z.copy()
                        zp[i] += h[i]
                        jac[:, i] = (residuals(zp, power, mu) - r) / h[i]
                    try:
                        step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
                    except np.linalg.LinAlgError:
                        break
                    alpha = 1.0
                    moved = False
                    for _ in range(25):
                        cand = z + alpha * step
                        rc = residuals(cand, power, mu)
                        if float(rc @ rc) < f0 - 1e-300:
                            z = cand
                            moved = True
                            break
                        alpha *= 0.5
                    iters += 1
                    if not moved or float(np.linalg.norm(alpha * step)) < cfg.tol:
                        break
        terms, _, pen = full_eval(z, 0.0)
        key = (plus_reduce(problem.cost.mode, terms), idx)
        if best is None or key < best[0]:
            best = (key, z, iters, idx)
    _, z, iters, idx = best
    chi0, omega, nu = unpack(z)
    if eliminate:
        return _result_from_decisions(problem, chi0, omega, "gauss-newton", iters, idx + 1)
    return _penalized_result(problem, chi0, omega, nu, "gauss-newton", iters, idx + 1)


# ---------------------------------------------------------------------------
# Dispatch and drivers
# ---------------------------------------------------------------------------

def _structured_applicable(problem: EstimationProblem) -> Optional[str]:
    model = problem.model
    if not (model.is_scalar and model.additive_v and model.additive_w):
        return None
    if problem.cost.mode is PlusMode.MAX:
        if model.f_image is not None and model.f_solve is not None:
            return "max"
        return None
    if (model.linear_a is not None and _sum_weights(problem) is not None
            and (problem.bounds is None or problem.bounds.empty)):
        return "sum"
    return None


def solve_window(problem: EstimationProblem, solver: SolverConfig) -> EstimateResult:
    """Solve one estimation window.

    The returned trajectory always satisfies the window dynamics exactly (the
    disturbances are read off the transitions); the achieved cost is the
    certified upper envelope over the attempted starts.
    """
    if solver.use_structured:
        kind = _structured_applicable(problem)
        if kind == "max":
            return _solve_max_scalar(problem, solver)
        if kind == "sum":
            return _solve_sum_scalar(problem, solver)
    if solver.method == "gauss_newton_penalty":
        return _solve_gauss_newton(problem, solver)
    return _solve_multistart_local(problem, solver)


def _initial_result(prior0: np.ndarray, model: SystemModel) -> EstimateResult:
    prior0 = np.atleast_1d(np.asarray(prior0, dtype=float))
    return EstimateResult(prior0[None, :].copy(), np.zeros((0, model.process_noise_dim)),
                          np.zeros((0, model.meas_noise_dim)), 0.0, "ok", "init",
                          prior0.copy(), 0)


def run_fie(model: SystemModel, cost: CostSpec, prior0, u_seq, y_seq,
            a_factor: float, solver: SolverConfig, t_max: int = 200) -> List[EstimateResult]:
    """Full-information estimates for t = 0..T.

    The window grows with t and the prior stays anchored at the initial
    estimate; beyond ``t_max`` the run refuses rather than silently switching
    to a moving horizon.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    y_seq = np.asarray(y_seq, dtype=float)
    T = len(y_seq)
    if T > t_max:
        raise HorizonCapError(f"full-information horizon {T} exceeds cap {t_max}")
    results = [_initial_result(prior0, model)]
    for t in range(1, T + 1):
        problem = EstimationProblem(model, cost, prior0, u_seq[:t], y_seq[:t], t, a_factor)
        results.append(solve_window(problem, solver))
    return results


def run_mhe(model: SystemModel, cost: CostSpec, prior0, u_seq, y_seq, horizon: int,
            a_factor: float, solver: SolverConfig) -> List[EstimateResult]:
    """Moving-horizon estimates for t = 0..T with the filtering prior.

    For t <= K this is exactly the growing-window scheme; afterwards each
    window is anchored at the estimator's own published estimate from K steps
    earlier.
    """
    if horizon < 1:
        raise DomainError("moving horizon must be >= 1")
    u_seq = np.asarray(u_seq, dtype=float)
    y_seq = np.asarray(y_seq, dtype=float)
    T = len(y_seq)
    results = [_initial_result(prior0, model)]
    for t in range(1, T + 1):
        if t <= horizon:
            problem = EstimationProblem(model, cost, prior0, u_seq[:t], y_seq[:t], t, a_factor)
        else:
            anchor = results[t - horizon].published
            problem = EstimationProblem(model, cost, anchor, u_seq[t - horizon:t],
                                        y_seq[t - horizon:t], horizon, a_factor)
        results.append(solve_window(problem, solver))
    return results


def certify_suboptimality(result: EstimateResult, reference: SolutionTuple, cost: CostSpec,
                          a_factor: float, tol_cert: float = 1e-9,
                          model: Optional[SystemModel] = None) -> CertificationRecord:
    """Check the suboptimality hypothesis against a feasible reference window.

    This inequality (achieved cost at most A times the reference cost) is the
    exact hypothesis under which the error bounds are asserted downstream; a
    failed certification excludes the step from bound checks rather than
    weakening them.
    """
    if model is not None:
        rep = verify_solution(model, reference, tol_dyn=1e-6)
        if not rep.passed:
            raise DomainError(f"reference window infeasible (residual {rep.worst_residual:.3e})")
    j_ref = eval_cost(cost, result.prior, reference.x[0], reference.w, reference.v)
    j_res = result.cost
    passed = j_res <= a_factor * j_ref + tol_cert
    if j_ref > 0:
        ratio = j_res / j_ref
    else:
        ratio = 1.0 if j_res <= tol_cert else math.inf
    return CertificationRecord(passed, ratio, j_res, j_ref)
