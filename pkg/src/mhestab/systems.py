"""Discrete-time plant models, simulation, and disturbance scenarios.

A plant is a pair of maps x+ = f(x, u, w), y = h(x, u, v) over real vector
spaces with a pluggable per-space metric (Euclidean by default).  Solutions
are stored as fixed-length tuples {x, u, w, v, y}; the simulator constructs
them by forward iteration so they satisfy the dynamics to rounding error, and
``verify_solution`` re-checks membership with the worst residual reported.

Four test plants ship with the package:

* ``s1`` -- scalar contractive: x+ = 0.5 x + w, y = x + v
* ``s2`` -- scalar unstable but detectable: x+ = 2 x + w, y = x + v
* ``s3`` -- scalar Lipschitz nonlinear: x+ = 0.5 sin(x) + w, y = x + v
* ``s4`` -- two-state nonlinear reactor-style model, scalar output

The scalar plants expose exact interval images and preimages of their noise-
free transition maps; the window solvers use those for structured solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .comparison import DomainError

TOL_DYN = 1e-9


class DivergenceError(RuntimeError):
    """Simulation produced a non-finite state; carries the failing time index."""

    def __init__(self, t: int):
        super().__init__(f"non-finite state at t={t}")
        self.t = t


def _euclidean(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Immutable plant description.

    ``f_nominal``/``h_nominal`` are the noise-free maps; ``additive_w`` and
    ``additive_v`` declare that f = f_nominal + w and h = h_nominal + v, which
    lets the estimator eliminate measurement-noise decision variables exactly.
    ``f_image`` and ``f_solve`` (scalar plants only) give the exact interval
    image of f_nominal and a point solving f_nominal(x) = c on an interval.
    """

    name: str
    state_dim: int
    input_dim: int
    process_noise_dim: int
    meas_noise_dim: int
    output_dim: int
    f: Callable
    h: Callable
    f_nominal: Callable
    h_nominal: Callable
    additive_w: bool = True
    additive_v: bool = True
    f_image: Optional[Callable] = None
    f_solve: Optional[Callable] = None
    linear_a: Optional[float] = None
    metric: Callable = _euclidean

    def dist(self, a, b) -> float:
        return self.metric(a, b)

    @property
    def is_scalar(self) -> bool:
        return (self.state_dim == 1 and self.process_noise_dim == 1
                and self.meas_noise_dim == 1 and self.output_dim == 1)


@dataclass(frozen=True, eq=False)
class SolutionTuple:
    """A length-K solution {x, u, w, v, y} of a plant.

    ``x[t+1] = f(x[t], u[t], w[t])`` holds for t < K-1 and
    ``y[t] = h(x[t], u[t], v[t])`` for all t; the final w maps the last stored
    state one step past the tuple and is kept because estimator windows
    penalize it.
    """

    x: np.ndarray  # (K, n)
    u: np.ndarray  # (K, du)
    w: np.ndarray  # (K, q)
    v: np.ndarray  # (K, m)
    y: np.ndarray  # (K, p)

    def __post_init__(self):
        for name in ("x", "u", "w", "v", "y"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr[:, None]
            object.__setattr__(self, name, arr)
        k = len(self.x)
        if any(len(getattr(self, name)) != k for name in ("u", "w", "v", "y")):
            raise DomainError("solution sequences must share one length")

    @property
    def length(self) -> int:
        return len(self.x)

    def window(self, start: int, stop: int) -> "SolutionTuple":
        return SolutionTuple(self.x[start:stop], self.u[start:stop], self.w[start:stop],
                             self.v[start:stop], self.y[start:stop])


def simulate(model: SystemModel, x0, u_seq, w_seq, v_seq, T: int) -> SolutionTuple:
    """Run the plant forward for T steps and return the solution tuple.

    Sequences must have length T; the tuple stores states x(0..T-1) and the
    outputs they generate.  A non-finite intermediate state raises
    :class:`DivergenceError` with the failing time index.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    u_seq = _as_seq(u_seq, T, model.input_dim)
    w_seq = _as_seq(w_seq, T, model.process_noise_dim)
    v_seq = _as_seq(v_seq, T, model.meas_noise_dim)
    xs = np.empty((T, model.state_dim))
    ys = np.empty((T, model.output_dim))
    x = x0
    for t in range(T):
        xs[t] = x
        ys[t] = np.atleast_1d(model.h(x, u_seq[t], v_seq[t]))
        x = np.atleast_1d(model.f(x, u_seq[t], w_seq[t]))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t)
    return SolutionTuple(xs, u_seq, w_seq, v_seq, ys)


def _as_seq(seq, T: int, dim: int) -> np.ndarray:
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape != (T, dim):
        raise DomainError(f"sequence shape {arr.shape} does not match ({T}, {dim})")
    return arr


@dataclass(frozen=True)
class ResidualReport:
    passed: bool
    worst_residual: float
    worst_t: int

    def __bool__(self):
        return self.passed


def verify_solution(model: SystemModel, sol: SolutionTuple, tol_dyn: float = TOL_DYN) -> ResidualReport:
    """Check tuple membership in the solution set, reporting the worst residual."""
    worst = 0.0
    worst_t = -1
    for t in range(sol.length - 1):
        pred = np.atleast_1d(model.f(sol.x[t], sol.u[t], sol.w[t]))
        res = model.dist(sol.x[t + 1], pred)
        if res > worst:
            worst, worst_t = res, t
    for t in range(sol.length):
        pred = np.atleast_1d(model.h(sol.x[t], sol.u[t], sol.v[t]))
        res = model.dist(sol.y[t], pred)
        if res > worst:
            worst, worst_t = res, t
    return ResidualReport(worst <= tol_dyn, worst, worst_t)


# ---------------------------------------------------------------------------
# Disturbance scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceScenario:
    """Deterministic disturbance recipe.

    kinds: ``zero``; ``bounded_uniform`` (amplitude); ``decaying_geometric``
    (amplitude, rate); ``impulse`` (time, magnitude -- applied to the process
    channel only).  Generation is keyed by a counter-based generator, so the
    same (scenario, seed) pair always reproduces the same sequences.
    """

    kind: str
    seed: int = 0
    horizon: int = 0
    amplitude: float = 0.0
    rate: float = 0.0
    time: int = 0
    magnitude: float = 0.0

    KINDS = ("zero", "bounded_uniform", "decaying_geometric", "impulse")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DomainError(f"unknown scenario kind {self.kind!r}")
        if self.horizon < 0:
            raise DomainError("scenario horizon must be nonnegative")


def _clip_norm(rows: np.ndarray, caps) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    caps = np.broadcast_to(np.asarray(caps, dtype=float), norms.shape)
    scale = np.ones_like(norms)
    over = norms > caps
    scale[over] = caps[over] / norms[over]
    return rows * scale[:, None]


def generate_scenario(spec: DisturbanceScenario, process_dim: int, meas_dim: int
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """Produce (w_seq, v_seq) of shape (T, q) and (T, m) for the scenario."""
    T = spec.horizon
    gen = np.random.Generator(np.random.Philox(key=spec.seed))
    if spec.kind == "zero":
        return np.zeros((T, process_dim)), np.zeros((T, meas_dim))
    if spec.kind == "bounded_uniform":
        w = _clip_norm(gen.uniform(-spec.amplitude, spec.amplitude, (T, process_dim)),
                       spec.amplitude)
        v = _clip_norm(gen.uniform(-spec.amplitude, spec.amplitude, (T, meas_dim)),
                       spec.amplitude)
        return w, v
    if spec.kind == "decaying_geometric":
        caps = spec.amplitude * spec.rate ** np.arange(T)
        w = _clip_norm(gen.uniform(-1.0, 1.0, (T, process_dim)) * caps[:, None], caps)
        v = _clip_norm(gen.uniform(-1.0, 1.0, (T, meas_dim)) * caps[:, None], caps)
        return w, v
    if spec.kind == "impulse":
        w = np.zeros((T, process_dim))
        if 0 <= spec.time < T:
            w[spec.time, 0] = spec.magnitude
        return w, np.zeros((T, meas_dim))
    raise DomainError(f"unknown scenario kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Built-in plants
# ---------------------------------------------------------------------------

def _linear_scalar(name: str, a: float) -> SystemModel:
    def f(x, u, w):
        return a * x + w

    def h(x, u, v):
        return x + v

    def f_nominal(x, u):
        return a * x

    def h_nominal(x, u):
        return x

    def f_image(lo, hi, u):
        lo2, hi2 = a * lo, a * hi
        if a >= 0:
            return lo2, hi2
        return hi2, lo2

    def f_solve(c, lo, hi, u):
        return min(max(c / a, lo), hi)

    return SystemModel(name, 1, 1, 1, 1, 1, f, h, f_nominal, h_nominal,
                       f_image=f_image, f_solve=f_solve, linear_a=a)


_TWO_PI = 2.0 * math.pi


def _sin_half_image(lo, hi, u):
    """Exact interval image of x -> 0.5 sin(x) over [lo, hi]."""
    s_lo, s_hi = np.sin(lo), np.sin(hi)
    base_lo = np.minimum(s_lo, s_hi)
    base_hi = np.maximum(s_lo, s_hi)
    # peak at pi/2 + 2k pi inside [lo, hi] forces the max to 1
    k_hi = np.floor((hi - math.pi / 2) / _TWO_PI)
    has_peak = math.pi / 2 + k_hi * _TWO_PI >= lo
    # trough at -pi/2 + 2k pi forces the min to -1
    k_lo = np.floor((hi + math.pi / 2) / _TWO_PI)
    has_trough = -math.pi / 2 + k_lo * _TWO_PI >= lo
    img_hi = np.where(has_peak, 1.0, base_hi)
    img_lo = np.where(has_trough, -1.0, base_lo)
    return 0.5 * img_lo, 0.5 * img_hi


def _sin_half_solve(c, lo, hi, u):
    """A point x in [lo, hi] with 0.5 sin(x) = c, assuming one exists.

    Each solution branch repeats with period 2 pi, so only the first period
    at or above lo needs checking per branch.
    """
    t = min(max(2.0 * c, -1.0), 1.0)
    base = math.asin(t)
    best = None
    for branch in (base, math.pi - base):
        k = math.ceil((lo - 1e-12 - branch) / _TWO_PI)
        cand = branch + k * _TWO_PI
        if cand <= hi + 1e-12:
            cand = min(max(cand, lo), hi)
            err = abs(0.5 * math.sin(cand) - c)
            if best is None or err < best[0]:
                best = (err, cand)
    if best is None:
        # fall back to the closest endpoint; callers only ask for reachable c
        return lo if abs(0.5 * math.sin(lo) - c) <= abs(0.5 * math.sin(hi) - c) else hi
    return best[1]


def _make_s3() -> SystemModel:
    def f(x, u, w):
        return 0.5 * np.sin(x) + w

    def h(x, u, v):
        return x + v

    def f_nominal(x, u):
        return 0.5 * np.sin(x)

    def h_nominal(x, u):
        return x

    return SystemModel("s3", 1, 1, 1, 1, 1, f, h, f_nominal, h_nominal,
                       f_image=_sin_half_image, f_solve=_sin_half_solve)


def _make_s4() -> SystemModel:
    def f_nominal(x, u):
        x = np.asarray(x, dtype=float)
        u0 = float(np.atleast_1d(u)[0])
        return np.array([
            0.8 * x[0] - 0.1 * np.tanh(x[1]) + 0.05 * u0,
            0.1 * np.sin(x[0]) + 0.7 * x[1],
        ])

    def f(x, u, w):
        return f_nominal(x, u) + np.asarray(w, dtype=float)

    def h_nominal(x, u):
        x = np.asarray(x, dtype=float)
        return np.array([x[0] + 0.5 * x[1]])

    def h(x, u, v):
        return h_nominal(x, u) + np.asarray(v, dtype=float)

    return SystemModel("s4", 2, 1, 2, 1, 1, f, h, f_nominal, h_nominal)


def builtin_model(name: str) -> SystemModel:
    try:
        return _PLANTS[name]
    except KeyError:
        raise DomainError(f"unknown plant {name!r}; available: {sorted(_PLANTS)}") from None


_PLANTS = {
    "s1": _linear_scalar("s1", 0.5),
    "s2": _linear_scalar("s2", 2.0),
    "s3": _make_s3(),
    "s4": _make_s4(),
}

PLANT_NAMES = tuple(sorted(_PLANTS))


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def solution_to_csv(sol: SolutionTuple) -> str:
    """Render a solution tuple as CSV text (stable formatting for diffing)."""
    cols = ["t"]
    for name in ("x", "u", "w", "v", "y"):
        arr = getattr(sol, name)
        cols += [f"{name}{i}" for i in range(arr.shape[1])]
    lines = [",".join(cols)]
    for t in range(sol.length):
        row = [str(t)]
        for name in ("x", "u", "w", "v", "y"):
            row += [_fmt(val) for val in getattr(sol, name)[t]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
