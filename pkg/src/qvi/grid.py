"""Uniform finite-difference grids on [0,1] and [0,1]^2 with elliptic operators.

Two boundary treatments are supported:

* ``dirichlet_zero`` -- homogeneous Dirichlet conditions, only the N interior
  nodes per axis are stored and the boundary values are eliminated from the
  stencil.
* ``neumann`` -- homogeneous Neumann conditions, the N+2 nodes per axis
  including the boundary are stored; the boundary closure is the symmetric
  (half-cell) ghost-reflection stencil, which keeps the operator symmetric,
  keeps it an M-matrix and reproduces constants exactly.

Nodes are ordered lexicographically with the x index varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

BC_DIRICHLET = "dirichlet_zero"
BC_NEUMANN = "neumann"

_CSV_FMT = "%.17g"


class LinearSolveError(RuntimeError):
    """Raised when the iterative linear solver fails to reach its tolerance."""

    def __init__(self, message, final_residual=None, iterations=None):
        super().__init__(message)
        self.final_residual = final_residual
        self.iterations = iterations


@dataclass(frozen=True)
class Grid:
    """Uniform grid on the unit interval or unit square.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    n_per_axis : int
        Number of interior nodes N per axis; the mesh size is h = 1/(N+1).
    bc : str
        ``dirichlet_zero`` or ``neumann``.

    Dirichlet grids store the N^dim interior nodes, Neumann grids store the
    (N+2)^dim nodes including the boundary.
    """

    dim: int
    n_per_axis: int
    bc: str = BC_DIRICHLET

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n_per_axis < 1:
            raise ValueError(f"n_per_axis must be positive, got {self.n_per_axis}")
        if self.bc not in (BC_DIRICHLET, BC_NEUMANN):
            raise ValueError(f"unknown boundary condition {self.bc!r}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_per_axis + 1)

    @property
    def nodes_per_axis(self) -> int:
        if self.bc == BC_DIRICHLET:
            return self.n_per_axis
        return self.n_per_axis + 2

    @property
    def node_count(self) -> int:
        return self.nodes_per_axis ** self.dim

    def axis_coords(self) -> np.ndarray:
        """Physical coordinates of the nodes along one axis."""
        h = self.h
        if self.bc == BC_DIRICHLET:
            return h * np.arange(1, self.n_per_axis + 1)
        return h * np.arange(0, self.n_per_axis + 2)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape (node_count, dim), x varying fastest."""
        ax = self.axis_coords()
        if self.dim == 1:
            return ax[:, None]
        x, y = np.meshgrid(ax, ax, indexing="xy")
        return np.column_stack([x.ravel(), y.ravel()])


@dataclass
class GridFunction:
    """Vector of nodal values attached to its grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.node_count,):
            raise ValueError(
                f"values has shape {self.values.shape}, "
                f"expected ({self.grid.node_count},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function contains non-finite entries")

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy())

    def __add__(self, other):
        self._check_grid(other)
        return GridFunction(self.grid, self.values + other.values)

    def __sub__(self, other):
        self._check_grid(other)
        return GridFunction(self.grid, self.values - other.values)

    def __rmul__(self, scalar):
        return GridFunction(self.grid, float(scalar) * self.values)

    def _check_grid(self, other):
        if not isinstance(other, GridFunction) or other.grid != self.grid:
            raise ValueError("grid functions live on different grids")


def grid_function(grid: Grid, fill) -> GridFunction:
    """Build a grid function from a constant or an array of nodal values."""
    if np.isscalar(fill):
        return GridFunction(grid, np.full(grid.node_count, float(fill)))
    return GridFunction(grid, np.asarray(fill, dtype=np.float64))


@dataclass
class DiscreteOperator:
    """Sparse matrix acting on the nodal values of one grid."""

    matrix: sp.csr_matrix
    grid: Grid
    symmetric: bool = False
    m_matrix: bool = False

    def __post_init__(self):
        n = self.grid.node_count
        if self.matrix.shape != (n, n):
            raise ValueError(
                f"matrix shape {self.matrix.shape} does not match node count {n}"
            )

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v


def is_m_matrix(matrix: sp.spmatrix) -> bool:
    """Scan test: every diagonal entry > 0 and every off-diagonal entry <= 0."""
    coo = matrix.tocoo()
    diag_mask = coo.row == coo.col
    if not np.all(coo.data[diag_mask] > 0):
        return False
    if matrix.diagonal().min() <= 0:
        return False
    return bool(np.all(coo.data[~diag_mask] <= 0))


def _laplacian_1d_dirichlet(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def _laplacian_1d_neumann(n: int, h: float) -> sp.csr_matrix:
    # Symmetric ghost-reflection closure: boundary rows (1, -1)/h^2 keep the
    # matrix symmetric with zero row sums, so constants stay in the kernel.
    m = n + 2
    main = np.full(m, 2.0)
    main[0] = main[-1] = 1.0
    off = np.full(m - 1, -1.0)
    return sp.diags([off, main, off], [-1, 0, 1], format="csr") / h**2


def assemble_dirichlet_operator(grid: Grid) -> DiscreteOperator:
    """Assemble the model operator (minus Laplacian plus identity).

    Uses the 3-point (1D) or 5-point (2D) stencil with zero-Dirichlet
    elimination. The result is a symmetric M-matrix.
    """
    if grid.bc != BC_DIRICHLET:
        raise ValueError("assemble_dirichlet_operator requires a dirichlet_zero grid")
    n, h = grid.n_per_axis, grid.h
    lap1 = _laplacian_1d_dirichlet(n, h)
    if grid.dim == 1:
        lap = lap1
    else:
        eye = sp.identity(n, format="csr")
        lap = sp.kron(eye, lap1, format="csr") + sp.kron(lap1, eye, format="csr")
    mat = (lap + sp.identity(grid.node_count, format="csr")).tocsr()
    return DiscreteOperator(mat, grid, symmetric=True, m_matrix=is_m_matrix(mat))


def assemble_neumann_operator(grid: Grid, k: float) -> DiscreteOperator:
    """Assemble the reaction-diffusion operator k*I - Lap with Neumann closure.

    Row sums are exactly k, so constants are exact solutions of
    (k*I - Lap) T = k*c.
    """
    if grid.bc != BC_NEUMANN:
        raise ValueError("assemble_neumann_operator requires a neumann grid")
    if k <= 0:
        raise ValueError(f"reaction coefficient k must be positive, got {k}")
    n, h = grid.n_per_axis, grid.h
    lap1 = _laplacian_1d_neumann(n, h)
    if grid.dim == 1:
        lap = lap1
    else:
        m = n + 2
        eye = sp.identity(m, format="csr")
        lap = sp.kron(eye, lap1, format="csr") + sp.kron(lap1, eye, format="csr")
    mat = (lap + k * sp.identity(grid.node_count, format="csr")).tocsr()
    return DiscreteOperator(mat, grid, symmetric=True, m_matrix=is_m_matrix(mat))


def l2_inner(u: GridFunction, v: GridFunction) -> float:
    """Discrete L2 pairing h^dim * sum(u_i v_i)."""
    if u.grid != v.grid:
        raise ValueError("l2_inner requires grid functions on the same grid")
    return u.grid.h ** u.grid.dim * float(np.dot(u.values, v.values))


def l2_norm(u: GridFunction) -> float:
    return np.sqrt(max(l2_inner(u, u), 0.0))


def vector_l2_norm(values: np.ndarray, grid: Grid) -> float:
    """Discrete L2 norm of a raw coefficient vector on the given grid."""
    return float(np.sqrt(grid.h ** grid.dim) * np.linalg.norm(values))


def linear_solve(
    op: DiscreteOperator,
    b: GridFunction,
    tol: float | None = None,
    max_iter: int | None = None,
) -> GridFunction:
    """Solve op x = b for a symmetric positive definite operator.

    Jacobi-preconditioned conjugate gradients on the true residual; the
    stopping test is in the discrete L2 norm. When ``tol`` is None it
    defaults to 1e-12 * (1 + ||b||), i.e. a relative tolerance.
    """
    if op.grid != b.grid:
        raise ValueError("operator and right hand side live on different grids")
    a = op.matrix
    bv = b.values
    grid = op.grid
    weight = np.sqrt(grid.h ** grid.dim)
    if tol is None:
        tol = 1e-12 * (1.0 + weight * np.linalg.norm(bv))
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = grid.node_count
    if max_iter is None:
        # n steps suffice in exact arithmetic; the slack absorbs rounding
        max_iter = n + 1000

    inv_diag = 1.0 / a.diagonal()
    x = np.zeros(n)
    r = bv.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(np.dot(r, z))
    it = 0
    while it < max_iter:
        if weight * np.linalg.norm(r) <= tol:
            # Recurrence residual can drift; accept only on the true residual.
            r_true = bv - a @ x
            if weight * np.linalg.norm(r_true) <= tol:
                return GridFunction(grid, x)
            r = r_true
            z = inv_diag * r
            p = z.copy()
            rz = float(np.dot(r, z))
        ap = a @ p
        pap = float(np.dot(p, ap))
        if pap <= 0:
            raise LinearSolveError(
                "conjugate gradients hit a non-positive curvature direction; "
                "operator is not positive definite",
                final_residual=weight * np.linalg.norm(r),
                iterations=it,
            )
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = float(np.dot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    r_true = bv - a @ x
    res = weight * np.linalg.norm(r_true)
    if res <= tol:
        return GridFunction(grid, x)
    raise LinearSolveError(
        f"conjugate gradients did not converge in {max_iter} iterations; "
        f"final discrete-L2 residual {res:.3e} > tol {tol:.3e}",
        final_residual=res,
        iterations=max_iter,
    )


def save_grid_function(gf: GridFunction, path) -> None:
    """Write nodal values as CSV with header i,j,value (j omitted in 1D).

    Values carry 17 significant digits so the round trip is bit exact.
    """
    nx = gf.grid.nodes_per_axis
    with open(path, "w", encoding="ascii") as fh:
        if gf.grid.dim == 1:
            fh.write("i,value\n")
            for i, val in enumerate(gf.values):
                fh.write(f"{i},{_CSV_FMT % val}\n")
        else:
            fh.write("i,j,value\n")
            for flat, val in enumerate(gf.values):
                i, j = flat % nx, flat // nx
                fh.write(f"{i},{j},{_CSV_FMT % val}\n")


def load_grid_function(path, grid: Grid) -> GridFunction:
    """Read a grid function written by :func:`save_grid_function`."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if raw.shape[0] != grid.node_count:
        raise ValueError(
            f"{path}: {raw.shape[0]} rows, expected {grid.node_count}"
        )
    values = np.empty(grid.node_count)
    nx = grid.nodes_per_axis
    if grid.dim == 1:
        values[raw[:, 0].astype(int)] = raw[:, 1]
    else:
        flat = raw[:, 1].astype(int) * nx + raw[:, 0].astype(int)
        values[flat] = raw[:, 2]
    return GridFunction(grid, values)
