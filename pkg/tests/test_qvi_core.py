import numpy as np
import pytest
from numpy.testing import assert_allclose

from qvi.grid import (
    BC_DIRICHLET,
    Grid,
    GridFunction,
    assemble_dirichlet_operator,
    grid_function,
    l2_norm,
)
from qvi.obstacle_vi import VISolverOptions, vi_solve_psor, ObstacleProblem
from qvi.qvi_core import (
    QVIProblem,
    lipschitz_diagnostic,
    perturbed_selection,
    qvi_fixed_point,
    solve_unconstrained,
)

OPTS = VISolverOptions(tol=1e-14)


def dirichlet_setup(n, f_val):
    g = Grid(1, n, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    return g, a, grid_function(g, f_val)


def test_problem_rejects_negative_phi_at_zero():
    g, a, f = dirichlet_setup(5, 1.0)
    with pytest.raises(ValueError):
        QVIProblem(a, f, lambda v: grid_function(g, -0.1))


def test_solve_unconstrained_zero_and_eigen():
    g, a, f0 = dirichlet_setup(40, 0.0)
    assert_allclose(solve_unconstrained(a, f0).values, 0.0, atol=1e-14)
    x = g.axis_coords()
    rhs = grid_function(g, (np.pi**2 + 1.0) * np.sin(np.pi * x))
    u = solve_unconstrained(a, rhs)
    assert np.max(np.abs(u.values - np.sin(np.pi * x))) <= 2.0 * g.h**2
    with pytest.raises(ValueError):
        solve_unconstrained(a, grid_function(g, -1.0))


def test_unconstrained_2d_positive_with_interior_max():
    g = Grid(2, 16, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    u = solve_unconstrained(a, grid_function(g, 1e2))
    assert np.min(u.values) >= 0.0
    n = g.n_per_axis
    center = (n // 2) * n + n // 2
    assert u.values[center] == np.max(u.values)


def test_constant_obstacle_converges_in_one_map():
    g, a, f = dirichlet_setup(10, 5.0)
    psi = grid_function(g, 0.2)
    prob = QVIProblem(a, f, lambda v: psi)
    q, trace = qvi_fixed_point(prob, tol=1e-11, options=OPTS)
    direct, _ = vi_solve_psor(ObstacleProblem(a, f, psi), tol=1e-14)
    assert np.array_equal(q.values, direct.values)
    # second application reproduces the first bitwise, so the gap hits zero
    assert trace.gaps[-1] == 0.0
    assert len(trace.gaps) == 2


def test_shift_obstacle_never_binds():
    # Phi(v) = v + 1 keeps the constraint slack, so the limit is the
    # unconstrained solution
    g, a, f = dirichlet_setup(10, 1.0)
    prob = QVIProblem(a, f, lambda v: GridFunction(g, v.values + 1.0))
    q, trace = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    u_bar = solve_unconstrained(a, f)
    assert l2_norm(q - u_bar) <= 1e-10
    assert trace.monotone_violation >= -1e-12


def test_monotone_bracketing_synthetic():
    g, a, f = dirichlet_setup(12, 4.0)
    phi = lambda v: grid_function(g, 0.15 + 0.3 * np.tanh(np.maximum(v.values, 0.0)))
    prob = QVIProblem(a, f, phi)
    q, trace = qvi_fixed_point(prob, tol=1e-11, options=OPTS)
    scale = 1.0 + np.max(np.abs(trace.sup_bound.values))
    assert trace.monotone_violation >= -1e-12 * scale
    for q_prev, q_next in zip(trace.iterates, trace.iterates[1:]):
        assert np.min(q_next.values - q_prev.values) >= -1e-12 * scale
        assert np.max(q_next.values - trace.sup_bound.values) <= 1e-10 * scale
    assert trace.converged


def test_non_subsolution_start_rejected():
    g, a, f = dirichlet_setup(8, 2.0)
    psi = grid_function(g, 0.1)
    prob = QVIProblem(a, f, lambda v: psi)
    high = grid_function(g, 5.0)  # far above S(f, high) = VI solution <= 0.1
    with pytest.raises(ValueError):
        qvi_fixed_point(prob, q0=high, options=OPTS)


def test_decreasing_iteration_from_supersolution():
    g, a, f = dirichlet_setup(10, 3.0)
    phi = lambda v: grid_function(g, 0.2 + 0.2 * np.tanh(np.maximum(v.values, 0.0)))
    prob = QVIProblem(a, f, phi)
    q_up, _ = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    q_down, trace = qvi_fixed_point(prob, tol=1e-12, options=OPTS, increasing=False)
    assert trace.monotone_violation >= -1e-12
    # both limits solve the QVI; for this contractive map they coincide
    assert l2_norm(q_up - q_down) <= 1e-9


def test_perturbed_selection_trivial_cases():
    g, a, f = dirichlet_setup(9, 3.0)
    psi = grid_function(g, 0.12)
    prob = QVIProblem(a, f, lambda v: psi)
    u, _ = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    d = grid_function(g, 1.0)
    q0, _ = perturbed_selection(prob, d, 0.0, u)
    assert np.array_equal(q0.values, u.values)
    qz, _ = perturbed_selection(prob, grid_function(g, 0.0), 0.5, u)
    assert np.array_equal(qz.values, u.values)
    with pytest.raises(ValueError):
        perturbed_selection(prob, grid_function(g, -1.0), 0.1, u)


def test_perturbed_selection_bracketing_and_t_comparison():
    g, a, f = dirichlet_setup(12, 4.0)
    phi = lambda v: grid_function(g, 0.2 + 0.25 * np.tanh(np.maximum(v.values, 0.0)))
    prob = QVIProblem(a, f, phi)
    u, _ = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    d = grid_function(g, np.linspace(0.0, 2.0, 12))
    q1, tr1 = perturbed_selection(prob, d, 1e-3, u, tol=1e-12, options=OPTS)
    q2, _ = perturbed_selection(prob, d, 1e-2, u, tol=1e-12, options=OPTS)
    assert np.min(q1.values - u.values) >= -1e-10
    assert np.max(q1.values - tr1.sup_bound.values) <= 1e-10
    assert np.min(q2.values - q1.values) >= -1e-10


def test_selection_scaling_identity():
    # q at (2t, d) and (t, 2d) solve the same perturbed problem
    g, a, f = dirichlet_setup(10, 3.0)
    psi = grid_function(g, 0.15)
    prob = QVIProblem(a, f, lambda v: psi)
    u, _ = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    d = grid_function(g, np.linspace(0.5, 1.5, 10))
    d2 = grid_function(g, 2.0 * d.values)
    qa, _ = perturbed_selection(prob, d, 2e-3, u, tol=1e-12, options=OPTS)
    qb, _ = perturbed_selection(prob, d2, 1e-3, u, tol=1e-12, options=OPTS)
    assert np.array_equal(qa.values, qb.values)


def test_lipschitz_diagnostic_thermoforming_bounded():
    from qvi import thermoforming as tf
    from qvi.qvi_core import lipschitz_diagnostic as ld

    cfg = tf.ThermoformingConfig(grid_n=64)
    asm = tf.assembly_for(cfg)
    f = GridFunction(asm.grid_u, asm.f)
    prob = QVIProblem(asm.a_op, f, lambda v: tf.phi_map(v, cfg))
    opts = VISolverOptions(tol=1e-13)
    u, _ = qvi_fixed_point(prob, tol=1e-10, options=opts)
    d = grid_function(asm.grid_u, (asm.grid_u.coords()[:, 0] > 0.5).astype(float))
    rows = ld(prob, d, [1e-2, 1e-3, 1e-4], u_base=u, tol=1e-10, options=opts)
    ratios = [r["ratio"] for r in rows]
    assert all(np.isfinite(ratios)) and max(ratios) < 1.0
    # ratios settle as t shrinks: the spread across the sweep stays small
    assert max(ratios) - min(ratios) <= 0.5 * max(max(ratios), 1e-30)


def test_lipschitz_diagnostic_zero_and_bounded():
    g, a, f = dirichlet_setup(12, 4.0)
    phi = lambda v: grid_function(g, 0.2 + 0.2 * np.tanh(np.maximum(v.values, 0.0)))
    prob = QVIProblem(a, f, phi)
    u, _ = qvi_fixed_point(prob, tol=1e-12, options=OPTS)
    rows0 = lipschitz_diagnostic(prob, grid_function(g, 0.0), [1e-2, 1e-3], u_base=u)
    assert all(r["ratio"] == 0.0 for r in rows0)
    d = grid_function(g, 1.0)
    rows = lipschitz_diagnostic(prob, d, [1e-2, 1e-3, 1e-4], u_base=u, options=OPTS)
    ratios = [r["ratio"] for r in rows]
    # bounded difference quotients, same order across two decades
    assert max(ratios) <= 10.0 * max(min(ratios), 1e-12) + 1.0
    assert max(ratios) < np.inf
