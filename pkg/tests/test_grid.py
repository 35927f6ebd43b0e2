import numpy as np
import pytest
from numpy.testing import assert_allclose

from qvi.grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    Grid,
    GridFunction,
    LinearSolveError,
    assemble_dirichlet_operator,
    assemble_neumann_operator,
    grid_function,
    is_m_matrix,
    l2_inner,
    l2_norm,
    linear_solve,
    load_grid_function,
    save_grid_function,
)


def test_grid_invariants():
    g = Grid(2, 64, BC_DIRICHLET)
    assert g.h * (g.n_per_axis + 1) == pytest.approx(1.0, abs=1e-15)
    assert g.node_count == 64**2
    gn = Grid(2, 64, BC_NEUMANN)
    assert gn.node_count == 66**2
    assert Grid(1, 5, BC_NEUMANN).node_count == 7


@pytest.mark.parametrize("dim,n,bc", [(0, 3, BC_DIRICHLET), (3, 3, BC_DIRICHLET),
                                      (1, 0, BC_DIRICHLET), (1, 3, "periodic")])
def test_grid_rejects_bad_args(dim, n, bc):
    with pytest.raises(ValueError):
        Grid(dim, n, bc)


def test_grid_function_rejects_nan_and_shape():
    g = Grid(1, 4, BC_DIRICHLET)
    with pytest.raises(ValueError):
        GridFunction(g, np.array([1.0, np.nan, 0.0, 0.0]))
    with pytest.raises(ValueError):
        GridFunction(g, np.zeros(5))


def test_dirichlet_1d_single_node_stencil():
    # N=1, h=1/2: the eliminated stencil reduces to [2/h^2 + 1] = [9]
    g = Grid(1, 1, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    assert_allclose(a.matrix.toarray(), [[9.0]])


def test_dirichlet_annihilates_constant_in_the_interior():
    g = Grid(2, 12, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    c = 3.7
    out = a.matrix @ np.full(g.node_count, c)
    # nodes with all four neighbours interior: Laplacian of a constant vanishes
    n = g.n_per_axis
    interior = np.zeros(g.node_count, dtype=bool)
    for j in range(1, n - 1):
        interior[j * n + 1 : j * n + n - 1] = True
    assert_allclose(out[interior], c, rtol=0, atol=1e-12)


def test_dirichlet_discrete_eigenfunction_identity():
    # sin(pi x) samples are an exact eigenvector with eigenvalue
    # (2 - 2 cos(pi h))/h^2 + 1; the continuum limit is pi^2 + 1 with O(h^2) error
    g = Grid(1, 3, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    x = g.axis_coords()
    u = np.sin(np.pi * x)
    lam = (2.0 - 2.0 * np.cos(np.pi * g.h)) / g.h**2 + 1.0
    assert_allclose(a.matrix @ u, lam * u, rtol=1e-13)
    taylor_c = np.pi**4 / 12 + 1.0  # |lam - (pi^2+1)| <= h^2 pi^4/12 roughly
    assert np.max(np.abs(a.matrix @ u - (np.pi**2 + 1.0) * u)) <= taylor_c * g.h**2


def test_dirichlet_rejects_neumann_grid():
    with pytest.raises(ValueError):
        assemble_dirichlet_operator(Grid(1, 3, BC_NEUMANN))


def test_neumann_row_sums_and_constants():
    g = Grid(1, 2, BC_NEUMANN)
    m = assemble_neumann_operator(g, 1.0)
    assert m.matrix.shape == (4, 4)
    assert_allclose(m.matrix @ np.ones(4), np.ones(4), atol=1e-14)
    g2 = Grid(2, 5, BC_NEUMANN)
    k = 2.5
    m2 = assemble_neumann_operator(g2, k)
    assert_allclose(m2.matrix @ np.ones(g2.node_count), k, atol=1e-12)
    # constants are exact solutions of (kI - Lap) T = k c
    c = -0.7
    rhs = grid_function(g2, k * c)
    sol = linear_solve(m2, rhs)
    assert_allclose(sol.values, c, atol=1e-11)


def test_neumann_rejects_bad_inputs():
    with pytest.raises(ValueError):
        assemble_neumann_operator(Grid(1, 3, BC_DIRICHLET), 1.0)
    with pytest.raises(ValueError):
        assemble_neumann_operator(Grid(1, 3, BC_NEUMANN), 0.0)


@pytest.mark.parametrize("make", [
    lambda: assemble_dirichlet_operator(Grid(1, 7, BC_DIRICHLET)),
    lambda: assemble_dirichlet_operator(Grid(2, 6, BC_DIRICHLET)),
    lambda: assemble_neumann_operator(Grid(1, 7, BC_NEUMANN), 0.5),
    lambda: assemble_neumann_operator(Grid(2, 6, BC_NEUMANN), 3.0),
])
def test_operators_symmetric_m_matrices(make):
    op = make()
    assert abs(op.matrix - op.matrix.T).max() == 0.0
    assert op.m_matrix
    assert is_m_matrix(op.matrix)


def test_discrete_maximum_principle():
    # M-matrix + nonnegative rhs => nonnegative solution, 100 random draws
    rng = np.random.default_rng(42)
    g = Grid(2, 8, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    for _ in range(100):
        b = grid_function(g, rng.uniform(0.0, 10.0, g.node_count))
        x = linear_solve(a, b)
        assert np.min(x.values) >= -1e-12


def test_dirichlet_coercivity_quadratic_form():
    rng = np.random.default_rng(7)
    g = Grid(2, 7, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    for _ in range(50):
        v = rng.standard_normal(g.node_count)
        assert v @ (a.matrix @ v) >= v @ v - 1e-9


def test_l2_inner_closed_form_and_edge_cases():
    g = Grid(2, 64, BC_DIRICHLET)
    one = grid_function(g, 1.0)
    assert l2_inner(one, one) == pytest.approx(g.h**2 * g.node_count, rel=1e-15)
    # interior-only measure approaches 1 from below as N grows
    assert l2_inner(one, one) == pytest.approx((64 / 65) ** 2, rel=1e-14)
    zero = grid_function(g, 0.0)
    assert l2_inner(zero, one) == 0.0
    # disjoint supports
    u = np.zeros(g.node_count)
    v = np.zeros(g.node_count)
    u[: g.node_count // 2] = 1.0
    v[g.node_count // 2 :] = 2.0
    assert l2_inner(GridFunction(g, u), GridFunction(g, v)) == 0.0


def test_l2_inner_grid_mismatch():
    u = grid_function(Grid(1, 4, BC_DIRICHLET), 1.0)
    v = grid_function(Grid(1, 5, BC_DIRICHLET), 1.0)
    with pytest.raises(ValueError):
        l2_inner(u, v)


def test_linear_solve_consistency_and_oracle():
    rng = np.random.default_rng(3)
    g = Grid(1, 3, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    # recover a planted solution
    x0 = rng.standard_normal(3)
    b = GridFunction(g, a.matrix @ x0)
    x = linear_solve(a, b)
    assert_allclose(x.values, x0, atol=1e-11)
    # rhs 1 against a dense factorization oracle
    b1 = grid_function(g, 1.0)
    dense = np.linalg.solve(a.matrix.toarray(), b1.values)
    assert_allclose(linear_solve(a, b1).values, dense, atol=1e-12)
    # zero rhs
    z = linear_solve(a, grid_function(g, 0.0))
    assert_allclose(z.values, 0.0, atol=1e-15)


def test_linear_solve_reports_nonconvergence():
    g = Grid(1, 20, BC_DIRICHLET)
    a = assemble_dirichlet_operator(g)
    b = grid_function(g, 1.0)
    with pytest.raises(LinearSolveError) as err:
        linear_solve(a, b, tol=1e-13, max_iter=2)
    assert err.value.final_residual is not None


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    for g in (Grid(1, 6, BC_DIRICHLET), Grid(2, 5, BC_NEUMANN)):
        u = grid_function(g, rng.standard_normal(g.node_count))
        path = tmp_path / f"f{g.dim}.csv"
        save_grid_function(u, path)
        back = load_grid_function(path, g)
        assert np.array_equal(back.values, u.values)
        header = path.read_text().splitlines()[0]
        assert header == ("i,value" if g.dim == 1 else "i,j,value")
