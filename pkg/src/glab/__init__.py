"""Monte Carlo laboratory for robust stochastic control under volatility
uncertainty: scenario families for the variance band, seeded path
simulation, worst-case expectation estimation, backward-regression adjoint
solving and a maximum-principle verification battery."""

from .scenario import (
    VolatilityBounds,
    ScenarioProcess,
    ScenarioFamily,
    AdaptedRule,
    g_function,
    make_scenario,
    canonical_family,
)
from .driver import (
    TimeGrid,
    PathBundle,
    StatePaths,
    simulate_driver,
    simulate_state,
    standard_normals,
)
from .control import (
    ControlProblem,
    Control,
    open_loop,
    feedback_rule,
    path_rule,
    perturb,
)
from .expectation import (
    Estimate,
    Functional,
    path_functional,
    performance_functional,
    evaluate_performance,
    expect_under,
    expect_sublinear,
)
from .adjoint import (
    BasisSpec,
    AdjointFit,
    AdjointSolution,
    hamiltonian,
    dH_du,
    dH_dx,
    solve_adjoint_under,
    aggregate_gbsde,
    solve_adjoint_family,
)
from .verify import (
    DerivativeProcess,
    GateauxResult,
    CriticalityResult,
    ConcavityResult,
    ConcavitySpec,
    SweepResult,
    SweepRow,
    VerificationReport,
    derivative_process,
    gateaux_check,
    check_criticality,
    check_concavity,
    robustness_sweep,
    run_battery,
    k_residual_excess,
    standard_betas,
    sign_switch_beta,
)
from .problems import builtin, value_oracle, random_problem, BUILTIN_IDS
from . import errors

__version__ = "0.1.0"
