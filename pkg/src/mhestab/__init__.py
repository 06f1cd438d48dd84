"""Time-discounted full-information and moving-horizon estimation with
numerically verified robust-stability bounds."""

from .comparison import (
    CapabilityError,
    ComposedK,
    DomainError,
    GridEvidence,
    IterK,
    IteratedKL,
    KFn,
    KLFn,
    KOfKL,
    LinearK,
    PiecewiseLinearK,
    PlusMode,
    PointwiseMaxKL,
    PointwiseSumKL,
    PowerK,
    ScaledShiftKL,
    SeparableGeometric,
    SFloorKL,
    SumK,
    TabulatedKL,
    TriangleGrowth,
    check_kl_on_grid,
    check_summable,
    check_triangle,
    format_kfn,
    format_klfn,
    iterate_k,
    k_inverse,
    kl_eval,
    log_grid,
    parse_kfn,
    parse_klfn,
    plus_reduce,
    triangle_constant,
)
from .systems import (
    DisturbanceScenario,
    DivergenceError,
    SolutionTuple,
    SystemModel,
    builtin_model,
    generate_scenario,
    simulate,
    solution_to_csv,
    verify_solution,
)
from .certificates import (
    CompatibilityWitness,
    CostSpec,
    DerivedBounds,
    IossCertificate,
    builtin_certificate,
    check_compatibility,
    check_ioss_on_pair,
    default_cost_from_certificate,
    derive_bcd,
    eval_rgas_rhs,
    falsify_certificate,
)
from .estimator import (
    BoxBounds,
    CertificationRecord,
    EstimateResult,
    EstimationProblem,
    HorizonCapError,
    InfeasibleWindowError,
    SolverConfig,
    certify_suboptimality,
    eval_cost,
    run_fie,
    run_mhe,
    solve_window,
)
from .stability import (
    BarBounds,
    ContractionAnalysis,
    EventuallyExponentialWitness,
    HatBounds,
    build_bar_bounds,
    build_hat_bounds,
    check_eventually_exponential,
    check_sum_to_max_lemma,
    equality_threshold,
    eval_mhe_bound,
    find_contraction_max,
    find_contraction_sum,
    preserve_inner_discounting,
    rges_envelope,
)
from .harness import (
    AnalysisError,
    BoundViolationError,
    ConfigError,
    ExperimentConfig,
    ScenarioSpec,
    analyze,
    deviant_output_probe,
    horizon_sweep,
    load_config,
    run_experiment,
)

__version__ = "0.1.0"
