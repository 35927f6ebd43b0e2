"""Obstacle-type quasi-variational inequalities on finite-difference grids."""

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    DiscreteOperator,
    Grid,
    GridFunction,
    LinearSolveError,
    assemble_dirichlet_operator,
    assemble_neumann_operator,
    grid_function,
    l2_inner,
    l2_norm,
    linear_solve,
    load_grid_function,
    save_grid_function,
)
from .obstacle_vi import (
    ActiveSet,
    ObstacleProblem,
    SolveError,
    SolveReport,
    VISolverOptions,
    complementarity_residual,
    s0_map,
    s_map,
    vi_solve_penalty,
    vi_solve_psor,
)
from .qvi_core import (
    IterationTrace,
    QVIProblem,
    lipschitz_diagnostic,
    perturbed_selection,
    qvi_fixed_point,
    solve_unconstrained,
)
from .sensitivity import (
    CriticalConeSpec,
    SmoothedMax,
    alpha_iteration,
    build_critical_cone,
    coincidence_lemma_checks,
    coupled_derivative_solve,
    derivative_pde_solve,
    difference_quotient_check,
    expansion_validation,
    indicator_right_half,
)
from .thermoforming import (
    ThermoformingConfig,
    ThermoformingState,
    beltrami_flatness_diagnostic,
    bump_rho,
    check_assumptions,
    coupled_newton,
    coupled_residual,
    g_eval,
    g_prime,
    l_apply,
    mould_phi0,
    phi_derivative_apply,
    phi_map,
    temperature_solve,
)

__version__ = "0.1.0"
