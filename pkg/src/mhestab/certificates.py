"""Detectability certificates, cost compatibility, and the derived bounds.

A certificate packages the comparison functions of a time-discounted
incremental input/output-to-state stability statement: a K-infinity alpha on
the left and KL gains (beta, gamma, delta, epsilon, phi) on the right, under
one global plus mode.  Certificates are checked, not trusted: any pair of
solutions can be tested against the inequality, and candidate certificates
without a derivation are validated by falsification sampling only.

From a certificate and a compatible cost the module derives the bound triple
(b, c, d) that drives every stability statement downstream, and evaluates the
full-information error bound along disturbance sequences.

Shipped fixtures
----------------
Per plant and mode the catalog records how the certificate was obtained:

* ``s1`` / ``s3`` sum mode: closed-form error recursion (proven);
  x-difference obeys e+ = 0.5 e + dw, so beta(r,s) = 0.5^s r and
  gamma(r,s) = 2 * 0.5^s r bound the summed tail exactly.
* ``s1`` / ``s3`` max mode: proven via the split a+b <= max{1.5a, 3b} and the
  geometric-tail-to-max bound with rate 0.75, which inflates the gains.
* ``s2`` both modes: one-step output injection e(t) = 2 dy - 2 dv + dw gives
  age-one gains (3r, 6r, 6r); geometric extensions keep them KL (proven).
* ``s1-shared``: the shared sum-mode gains re-tagged max.  This is an
  analysis fixture for contraction-threshold algebra; it is *not* a proven
  max-mode certificate and is excluded from falsification claims.
* ``s4``: candidate constants from a Lipschitz estimate, validated only by
  falsification sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .comparison import (
    CapabilityError,
    ComposedK,
    DomainError,
    GridEvidence,
    KFn,
    KLFn,
    LinearK,
    PlusMode,
    PointwiseMaxKL,
    PointwiseSumKL,
    ScaledShiftKL,
    SeparableGeometric,
    SummabilityEvidence,
    TriangleGrowth,
    check_summable,
    log_grid,
    plus_reduce,
)
from .systems import SolutionTuple, SystemModel, simulate

TOL_CERT = 1e-9

#: how a certificate's validity was established
VALIDITY_TAGS = ("proven", "sampled", "declared")


@dataclass(frozen=True)
class IossCertificate:
    """Detectability data: alpha K-infinity, five KL gains, one plus mode."""

    name: str
    mode: PlusMode
    alpha: KFn
    beta: KLFn
    gamma: KLFn
    delta: KLFn
    epsilon: KLFn
    phi: KLFn
    validity: str = "declared"
    summability: Optional[Dict[str, SummabilityEvidence]] = None
    r_range: Tuple[float, float] = (1e-9, 1e3)

    def __post_init__(self):
        if self.validity not in VALIDITY_TAGS:
            raise DomainError(f"unknown validity tag {self.validity!r}")
        if not self.alpha.is_unbounded:
            raise DomainError("certificate alpha must be K-infinity")
        if self.mode is PlusMode.SUM:
            ev = self.summability or {}
            missing = [k for k in ("gamma", "delta", "epsilon", "phi") if k not in ev]
            if missing:
                raise DomainError(f"sum-mode certificate lacks summability evidence for {missing}")
            failing = [k for k, e in ev.items() if not e.passed]
            if failing:
                raise DomainError(f"sum-mode summability evidence failing for {failing}")

    def gains(self) -> Dict[str, KLFn]:
        return {"beta": self.beta, "gamma": self.gamma, "delta": self.delta,
                "epsilon": self.epsilon, "phi": self.phi}


@dataclass(frozen=True)
class CostSpec:
    """Stage-cost comparison functions, matched in mode to a certificate."""

    mode: PlusMode
    beta_hat: KLFn
    gamma_hat: KLFn
    delta_hat: KLFn
    summability: Optional[Dict[str, SummabilityEvidence]] = None
    name: str = "cost"

    def __post_init__(self):
        if self.mode is PlusMode.SUM:
            ev = self.summability or {}
            missing = [k for k in ("gamma_hat", "delta_hat") if k not in ev]
            if missing:
                raise DomainError(f"sum-mode cost lacks summability evidence for {missing}")
            failing = [k for k, e in ev.items() if not e.passed]
            if failing:
                raise DomainError(f"sum-mode cost summability failing for {failing}")


@dataclass(frozen=True)
class CompatibilityWitness:
    """Constant B and triangle map N under which cost dominates certificate."""

    passed: bool
    B: Optional[float]
    N: TriangleGrowth
    worst_ratio: float
    evidence: Tuple[GridEvidence, ...]

    def __bool__(self):
        return self.passed


@dataclass(frozen=True)
class DerivedBounds:
    """The bound triple (b, c, d) of the suboptimality-to-error estimate."""

    mode: PlusMode
    b: KLFn
    c: KLFn
    d: KLFn
    a_factor: float
    B: float
    provenance: Tuple[str, str]

    def __post_init__(self):
        if self.a_factor < 1.0:
            raise DomainError("suboptimality factor must be >= 1")


@dataclass(frozen=True)
class PairMargin:
    """Worst slack of the trajectory-pair inequality over a horizon."""

    passed: bool
    min_margin: float
    worst_t: int
    margins: np.ndarray

    def __bool__(self):
        return self.passed


def check_ioss_on_pair(cert: IossCertificate, model: SystemModel,
                       sol1: SolutionTuple, sol2: SolutionTuple,
                       tol_cert: float = TOL_CERT) -> PairMargin:
    """Test the certificate inequality on a concrete pair of solutions.

    For every t the left side alpha(|x(t), chi(t)|) is compared against the
    folded right side; the minimum margin over t is returned and the check
    passes when it stays above -tol_cert.  The input and output discrepancy
    terms are evaluated exactly like the disturbance ones, so pairs with
    deviant inputs or outputs exercise the full inequality.
    """
    if sol1.length != sol2.length:
        raise DomainError("paired solutions must have equal length")
    if sol1.x.shape[1] != model.state_dim:
        raise DomainError("solution does not match model dimensions")
    T = sol1.length
    d_x = np.array([model.dist(sol1.x[t], sol2.x[t]) for t in range(T)])
    d_w = np.array([model.dist(sol1.w[t], sol2.w[t]) for t in range(T)])
    d_v = np.array([model.dist(sol1.v[t], sol2.v[t]) for t in range(T)])
    d_u = np.array([model.dist(sol1.u[t], sol2.u[t]) for t in range(T)])
    d_y = np.array([model.dist(sol1.y[t], sol2.y[t]) for t in range(T)])
    margins = np.empty(T)
    for t in range(T):
        terms = [cert.beta(d_x[0], t)]
        for tau in range(1, t + 1):
            j = t - tau
            terms.append(plus_reduce(cert.mode, (
                cert.gamma(d_w[j], tau),
                cert.delta(d_v[j], tau),
                cert.epsilon(d_u[j], tau),
                cert.phi(d_y[j], tau),
            )))
        rhs = plus_reduce(cert.mode, terms)
        margins[t] = rhs - cert.alpha(d_x[t])
    worst_t = int(np.argmin(margins))
    return PairMargin(bool(margins[worst_t] >= -tol_cert), float(margins[worst_t]),
                      worst_t, margins)


def default_cost_from_certificate(cert: IossCertificate, n: TriangleGrowth) -> CostSpec:
    """The canonical cost: beta_hat(r,s) = beta(N(s) r, s) and likewise for
    the disturbance gains, which meets the compatibility condition with B = 1
    and equality on the grid.

    In sum mode the scaled gains must still carry a summability bound; if the
    base evidence cannot be transported a :class:`CapabilityError` is raised.
    """
    beta_hat = ScaledShiftKL(cert.beta, n)
    gamma_hat = ScaledShiftKL(cert.gamma, n)
    delta_hat = ScaledShiftKL(cert.delta, n)
    summability = None
    if cert.mode is PlusMode.SUM:
        ev = cert.summability or {}
        summability = {}
        for key, fn in (("gamma_hat", gamma_hat), ("delta_hat", delta_hat)):
            base_key = key.replace("_hat", "")
            if base_key not in ev:
                raise CapabilityError(f"certificate carries no summability bound for {base_key}")
            sigma_scaled = ComposedK((ev[base_key].sigma, LinearK(n(0))))
            record = check_summable(fn, sigma_scaled)
            if not record.passed:
                raise CapabilityError(f"scaled {base_key} lost its summability bound")
            summability[key] = record
    return CostSpec(cert.mode, beta_hat, gamma_hat, delta_hat, summability,
                    name=f"default({cert.name})")


def check_compatibility(cert: IossCertificate, cost: CostSpec, n: TriangleGrowth,
                        r_grid: Optional[np.ndarray] = None, s_max: int = 32,
                        b_candidates: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
                        rel_tol: float = 1e-9) -> CompatibilityWitness:
    """Find the smallest B from a candidate list dominating all three gain
    inequalities on the (r, s) grid; report the worst ratio otherwise."""
    if cert.mode is not cost.mode:
        raise DomainError("certificate and cost must share one plus mode")
    grid = log_grid(per_decade=8) if r_grid is None else np.asarray(r_grid, dtype=float)
    pairs = (
        ("beta", cert.beta, cost.beta_hat),
        ("gamma", cert.gamma, cost.gamma_hat),
        ("delta", cert.delta, cost.delta_hat),
    )
    worst_ratio = 0.0
    evidence = []
    for name, base, hat in pairs:
        ratio = 0.0
        worst_pt = (float(grid[0]), 0)
        for s in range(s_max + 1):
            for r in grid:
                num = base(n(s) * r, s)
                den = hat(r, s)
                if num == 0.0:
                    continue
                if den == 0.0:
                    ratio = math.inf
                    worst_pt = (float(r), s)
                    break
                q = num / den
                if q > ratio:
                    ratio = q
                    worst_pt = (float(r), s)
            if ratio == math.inf:
                break
        worst_ratio = max(worst_ratio, ratio)
        evidence.append(GridEvidence(True, ratio, worst_pt, f"{name} ratio",
                                     (float(grid[0]), float(grid[-1]))))
    for b_cand in sorted(b_candidates):
        if worst_ratio <= b_cand * (1 + rel_tol):
            return CompatibilityWitness(True, float(b_cand), n, worst_ratio, tuple(evidence))
    return CompatibilityWitness(False, None, n, worst_ratio, tuple(evidence))


def derive_bcd(cert: IossCertificate, cost: CostSpec, witness: CompatibilityWitness,
               a_factor: float) -> DerivedBounds:
    """Assemble b, c, d: the certificate gain at triangle-scaled argument
    combined (mode plus) with the A*B-scaled cost gain."""
    if not witness.passed:
        raise DomainError("compatibility witness does not pass")
    if cert.mode is not cost.mode:
        raise DomainError("certificate and cost must share one plus mode")
    if a_factor < 1.0:
        raise DomainError("suboptimality factor must be >= 1")
    combine = PointwiseMaxKL if cert.mode is PlusMode.MAX else PointwiseSumKL
    ab = a_factor * witness.B

    def make(base: KLFn, hat: KLFn) -> KLFn:
        return combine((ScaledShiftKL(base, witness.N), ScaledShiftKL(hat, 1.0, 0, ab)))

    return DerivedBounds(cert.mode,
                         make(cert.beta, cost.beta_hat),
                         make(cert.gamma, cost.gamma_hat),
                         make(cert.delta, cost.delta_hat),
                         a_factor, witness.B, (cert.name, cost.name))


def eval_rgas_rhs(bounds: DerivedBounds, init_dist: float,
                  w_seq: np.ndarray, v_seq: np.ndarray, t: int) -> float:
    """Right side of the full-information error bound at time t.

    ``w_seq``/``v_seq`` must cover indices 0..t-1; the disturbance at time
    t - tau enters with discount tau.
    """
    if t < 0:
        raise DomainError("time index must be nonnegative")
    terms = [bounds.b(init_dist, t)]
    w = np.asarray(w_seq, dtype=float)
    v = np.asarray(v_seq, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    if v.ndim == 1:
        v = v[:, None]
    for tau in range(1, t + 1):
        j = t - tau
        terms.append(plus_reduce(bounds.mode, (
            bounds.c(float(np.linalg.norm(w[j])), tau),
            bounds.d(float(np.linalg.norm(v[j])), tau),
        )))
    return plus_reduce(bounds.mode, terms)


# ---------------------------------------------------------------------------
# Falsification sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FalsificationReport:
    passed: bool
    pairs: int
    worst_margin: float
    worst_pair_seed: int
    worst_t: int

    def __bool__(self):
        return self.passed

    def to_csv(self) -> str:
        lines = ["pairs,worst_pair_seed,worst_t,worst_margin,passed"]
        lines.append(f"{self.pairs},{self.worst_pair_seed},{self.worst_t},"
                     f"{self.worst_margin!r},{int(self.passed)}")
        return "\n".join(lines) + "\n"


def falsify_certificate(cert: IossCertificate, model: SystemModel, n_pairs: int = 1000,
                        horizon: int = 24, seed: int = 0, scale: float = 2.0,
                        tol_cert: float = TOL_CERT) -> FalsificationReport:
    """Search for trajectory pairs violating the certificate inequality.

    Pairs draw independent initial states and disturbance sequences (uniform
    with random per-pair amplitude, plus occasional impulses), so deviant
    inputs and outputs are exercised as well.  Used to validate candidate
    certificates that have no closed-form derivation.
    """
    gen = np.random.Generator(np.random.Philox(key=seed))
    worst = math.inf
    worst_seed = -1
    worst_t = -1
    for k in range(n_pairs):
        amp_w = scale * 0.1 * gen.uniform(0, 1)
        amp_v = scale * 0.1 * gen.uniform(0, 1)
        sols = []
        for _ in range(2):
            x0 = gen.uniform(-scale, scale, model.state_dim)
            u = gen.uniform(-1.0, 1.0, (horizon, model.input_dim))
            w = gen.uniform(-amp_w, amp_w, (horizon, model.process_noise_dim))
            v = gen.uniform(-amp_v, amp_v, (horizon, model.meas_noise_dim))
            if gen.uniform() < 0.25:
                w[gen.integers(0, horizon), 0] += gen.uniform(-scale, scale)
            sols.append(simulate(model, x0, u, w, v, horizon))
        margin = check_ioss_on_pair(cert, model, sols[0], sols[1], tol_cert)
        if margin.min_margin < worst:
            worst = margin.min_margin
            worst_seed = k
            worst_t = margin.worst_t
    return FalsificationReport(worst >= -tol_cert, n_pairs, worst, worst_seed, worst_t)


# ---------------------------------------------------------------------------
# Built-in certificate catalog
# ---------------------------------------------------------------------------

def _geom(c: float, lam: float) -> SeparableGeometric:
    return SeparableGeometric(c, 1.0, lam)


def _sum_evidence(gains: Dict[str, KLFn]) -> Dict[str, SummabilityEvidence]:
    out = {}
    for key in ("gamma", "delta", "epsilon", "phi"):
        fn = gains[key]
        if not isinstance(fn, SeparableGeometric):
            raise CapabilityError("sum fixtures use geometric gains")
        sigma = LinearK(fn.c / (1.0 - fn.lam)) if fn.c > 0 else LinearK(1e-12)
        out[key] = check_summable(fn, sigma)
    return out


def _make_cert(name, mode, beta, gamma, delta, epsilon, phi, validity):
    gains = {"beta": beta, "gamma": gamma, "delta": delta, "epsilon": epsilon, "phi": phi}
    summ = _sum_evidence(gains) if mode is PlusMode.SUM else None
    return IossCertificate(name, mode, LinearK(1.0), beta, gamma, delta, epsilon, phi,
                           validity=validity, summability=summ)


def _catalog() -> Dict[Tuple[str, PlusMode], IossCertificate]:
    cat = {}
    # shared contractive gains: e+ = 0.5 e + dw (s1 exactly, s3 by Lipschitz 0.5)
    for plant in ("s1", "s3"):
        cat[(plant, PlusMode.SUM)] = _make_cert(
            plant, PlusMode.SUM,
            _geom(1.0, 0.5), _geom(2.0, 0.5), _geom(2.0, 0.5),
            _geom(1.0, 0.5), _geom(1.0, 0.5), "proven")
        # max mode pays the sum-to-max conversion: split 1.5/3, tail rate 0.75
        cat[(plant, PlusMode.MAX)] = _make_cert(
            plant, PlusMode.MAX,
            _geom(1.5, 0.5), _geom(12.0, 0.75), _geom(12.0, 0.75),
            _geom(1.0, 0.75), _geom(1.0, 0.75), "proven")
    # s2: one-step output injection, valid verbatim in both modes
    for mode in (PlusMode.MAX, PlusMode.SUM):
        cat[("s2", mode)] = _make_cert(
            "s2", mode,
            _geom(1.0, 0.5), _geom(6.0, 0.5), _geom(12.0, 0.5),
            _geom(1.0, 0.5), _geom(12.0, 0.5), "proven")
    # analysis fixture: shared gains tagged max; not a proven max certificate
    cat[("s1-shared", PlusMode.MAX)] = _make_cert(
        "s1-shared", PlusMode.MAX,
        _geom(1.0, 0.5), _geom(2.0, 0.5), _geom(2.0, 0.5),
        _geom(1.0, 0.5), _geom(1.0, 0.5), "declared")
    cat[("s1-shared", PlusMode.SUM)] = cat[("s1", PlusMode.SUM)]
    # s4 candidates: Lipschitz estimate 0.87 with sum-to-max headroom; sampled only
    for mode in (PlusMode.MAX, PlusMode.SUM):
        cat[("s4", mode)] = _make_cert(
            "s4", mode,
            _geom(3.0, 0.87), _geom(45.0, 0.93), _geom(1.0, 0.9),
            _geom(3.0, 0.93), _geom(1.0, 0.9), "sampled")
    return cat


_CERTS = _catalog()

CERTIFICATE_NAMES = tuple(sorted({k for k, _ in _CERTS}))


def builtin_certificate(name: str, mode: PlusMode) -> IossCertificate:
    try:
        return _CERTS[(name, mode)]
    except KeyError:
        raise DomainError(
            f"no certificate {name!r} for mode {mode.value}; available: "
            f"{sorted(set(k for k, _ in _CERTS))}") from None


def certificate_to_text(cert: IossCertificate) -> Dict[str, str]:
    """Declarative text form of a certificate (embeddable in config files)."""
    from .comparison import format_kfn, format_klfn
    out = {"name": cert.name, "mode": cert.mode.value, "validity": cert.validity,
           "alpha": format_kfn(cert.alpha)}
    for key, fn in cert.gains().items():
        out[key] = format_klfn(fn)
    return out


def cost_to_text(cost: CostSpec) -> Dict[str, str]:
    """Declarative text form of a cost specification."""
    from .comparison import format_klfn
    return {"name": cost.name, "mode": cost.mode.value,
            "beta_hat": format_klfn(cost.beta_hat),
            "gamma_hat": format_klfn(cost.gamma_hat),
            "delta_hat": format_klfn(cost.delta_hat)}
