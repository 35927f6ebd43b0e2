"""Fixed-obstacle variational inequality solvers.

Two routes are kept deliberately independent so each can serve as an oracle
for the other:

* :func:`vi_solve_penalty` -- semismooth Newton on the penalized equation
  A u + alpha * max(0, u - psi) - f = 0, constraint violation O(1/alpha);
* :func:`vi_solve_psor` -- projected SOR sweeps, exact constraints, valid for
  M-matrix operators.

``s_map`` and ``s0_map`` expose the upper-obstacle solution map S(f, psi) and
the zero-lower-obstacle map S0(g), related by
S(f, psi) = Phi(psi) - S0(A Phi(psi) - f).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.sparse.linalg import splu

from .grid import DiscreteOperator, GridFunction, vector_l2_norm


class SolveError(RuntimeError):
    """Solver failed; carries the residual history for diagnosis."""

    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])


@dataclass(frozen=True)
class ObstacleProblem:
    """Upper-obstacle problem: find u <= psi with <Au - f, u - v> <= 0."""

    a_op: DiscreteOperator
    f: GridFunction
    psi: GridFunction

    def __post_init__(self):
        if not (self.a_op.grid == self.f.grid == self.psi.grid):
            raise ValueError("operator, forcing and obstacle must share a grid")


@dataclass
class ActiveSet:
    """Nodes where the solution touches its obstacle, up to tol_act."""

    mask: np.ndarray
    tol_act: float

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class SolveReport:
    iterations: int
    residual_history: list[float]
    final_residual: float
    active_set: ActiveSet
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "iterations": self.iterations,
                "final_residual": self.final_residual,
                "residual_history": self.residual_history,
                "active_count": self.active_set.count,
                "wall_time_s": self.wall_time,
            }
        )


@dataclass(frozen=True)
class VISolverOptions:
    """Knobs shared by the VI solvers; method is 'psor' or 'penalty'."""

    method: str = "psor"
    tol: float = 1e-12
    omega: float = 1.5
    alpha: float = 1e8
    delta_n: float = 0.1
    max_iter: int | None = None


def default_activity_tol(psi: np.ndarray) -> float:
    # Scale-aware: exact coincidence is meaningless in floats.
    return 1e-8 * (1.0 + float(np.max(np.abs(psi))))


def active_set_for(u: GridFunction, psi: GridFunction, tol_act: float | None = None) -> ActiveSet:
    if tol_act is None:
        tol_act = default_activity_tol(psi.values)
    return ActiveSet(mask=(psi.values - u.values) <= tol_act, tol_act=tol_act)


def vi_solve_penalty(
    problem: ObstacleProblem,
    alpha: float = 1e8,
    tol: float = 1e-8,
    delta_n: float = 0.1,
    max_iter: int = 100,
) -> tuple[GridFunction, SolveReport]:
    """Semismooth Newton on A u + alpha*max(0, u - psi) - f = 0.

    The Newton matrix is A + alpha*D with D diagonal: 1 where u - psi > 0,
    ``delta_n`` on the exact-equality branch, 0 where u - psi < 0. Pure
    Newton without globalization; a residual-monotonicity watchdog aborts
    with diagnostics instead of damping.
    """
    if alpha <= 0:
        raise ValueError(f"penalty parameter alpha must be positive, got {alpha}")
    if not 0.0 <= delta_n <= 1.0:
        raise ValueError(f"delta_n must lie in [0, 1], got {delta_n}")
    t0 = time.perf_counter()
    grid = problem.a_op.grid
    a = problem.a_op.matrix
    abs_a = abs(a)
    fv, psiv = problem.f.values, problem.psi.values
    u = np.zeros(grid.node_count)
    history: list[float] = []
    bad_steps = 0
    for _ in range(max_iter):
        gap = u - psiv
        penalty = alpha * np.maximum(0.0, gap)
        resid = a @ u + penalty - fv
        rnorm = vector_l2_norm(resid, grid)
        history.append(rnorm)
        # On contact nodes the gap is resolved only to ulp(max(|u|,|psi|)),
        # so alpha*max(0, u - psi) has a granularity of alpha*eps*|u| there;
        # the residual cannot reliably drop below that floor in float64.
        granules = abs_a @ np.abs(u) + np.abs(fv)
        granules = granules + np.where(
            gap >= 0.0, alpha * np.maximum(np.abs(u), np.abs(psiv)), 0.0
        )
        floor = 2.0 * np.finfo(float).eps * vector_l2_norm(granules, grid)
        if rnorm < max(tol, floor):
            uf = GridFunction(grid, u)
            report = SolveReport(
                iterations=len(history) - 1,
                residual_history=history,
                final_residual=rnorm,
                active_set=active_set_for(uf, problem.psi),
                wall_time=time.perf_counter() - t0,
            )
            return uf, report
        if len(history) >= 2 and rnorm > history[-2] and rnorm > 10 * tol:
            bad_steps += 1
            if bad_steps >= 2:
                raise SolveError(
                    "penalty Newton residual stopped decreasing "
                    f"(last residuals {history[-3:]}); aborting instead of damping",
                    residual_history=history,
                )
        else:
            bad_steps = 0
        dvals = np.where(gap > 0.0, 1.0, np.where(gap == 0.0, delta_n, 0.0))
        jac = (a + alpha * sp.diags(dvals)).tocsc()
        u = u + splu(jac).solve(-resid)
    raise SolveError(
        f"penalty Newton exceeded {max_iter} iterations; "
        f"final residual {history[-1]:.3e}",
        residual_history=history,
    )


@njit(cache=True)
def _psor_sweep(indptr, indices, data, diag, f, psi, u, omega):
    """One projected SOR sweep in place; returns the squared change."""
    change_sq = 0.0
    for i in range(u.shape[0]):
        s = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            s += data[k] * u[indices[k]]
        unew = u[i] + omega * (f[i] - s) / diag[i]
        if unew > psi[i]:
            unew = psi[i]
        d = unew - u[i]
        change_sq += d * d
        u[i] = unew
    return change_sq


def psor_sweeps(
    a: sp.csr_matrix,
    f: np.ndarray,
    psi: np.ndarray,
    u0: np.ndarray,
    omega: float,
    tol_change: float,
    weight: float,
    max_sweeps: int,
) -> tuple[np.ndarray, list[float]]:
    """Run projected SOR until the weighted change norm drops below tol.

    ``weight`` converts the Euclidean change norm into the discrete L2 norm.
    Returns the iterate and the per-sweep change-norm history.
    """
    a = a.tocsr()
    u = u0.astype(np.float64).copy()
    diag = a.diagonal()
    history: list[float] = []
    for _ in range(max_sweeps):
        change_sq = _psor_sweep(
            a.indptr, a.indices, a.data, diag, f, psi, u, omega
        )
        change = weight * np.sqrt(change_sq)
        history.append(change)
        if change <= tol_change:
            return u, history
    raise SolveError(
        f"projected SOR did not converge within {max_sweeps} sweeps; "
        f"last change {history[-1]:.3e} > tol {tol_change:.3e}",
        residual_history=history,
    )


def vi_solve_psor(
    problem: ObstacleProblem,
    omega: float = 1.5,
    tol: float = 1e-12,
    max_iter: int | None = None,
    u0: np.ndarray | None = None,
) -> tuple[GridFunction, SolveReport]:
    """Projected SOR for the exact-constraint VI; requires an M-matrix.

    Sweeps u_i <- min(psi_i, u_i + omega*(f_i - (Au)_i)/A_ii) until the
    successive-iterate discrete-L2 norm drops below ``tol``.
    """
    if not problem.a_op.m_matrix:
        raise ValueError(
            "projected SOR requires an M-matrix operator (convergence is "
            "not guaranteed otherwise)"
        )
    if not 0.0 < omega < 2.0:
        raise ValueError(f"relaxation omega must lie in (0, 2), got {omega}")
    t0 = time.perf_counter()
    grid = problem.a_op.grid
    if max_iter is None:
        max_iter = 200 * grid.node_count + 20000
    start = np.zeros(grid.node_count) if u0 is None else np.asarray(u0, dtype=np.float64)
    weight = np.sqrt(grid.h ** grid.dim)
    u, history = psor_sweeps(
        problem.a_op.matrix,
        problem.f.values,
        problem.psi.values,
        np.minimum(start, problem.psi.values),
        omega,
        tol,
        weight,
        max_iter,
    )
    uf = GridFunction(grid, u)
    report = SolveReport(
        iterations=len(history),
        residual_history=history,
        final_residual=history[-1],
        active_set=active_set_for(uf, problem.psi),
        wall_time=time.perf_counter() - t0,
    )
    return uf, report


def _solve(problem: ObstacleProblem, options: VISolverOptions) -> GridFunction:
    if options.method == "psor":
        u, _ = vi_solve_psor(
            problem,
            omega=options.omega,
            tol=options.tol,
            max_iter=options.max_iter,
        )
    elif options.method == "penalty":
        u, _ = vi_solve_penalty(
            problem,
            alpha=options.alpha,
            tol=max(options.tol, 1e-10),
            delta_n=options.delta_n,
            max_iter=options.max_iter or 100,
        )
    else:
        raise ValueError(f"unknown VI solver method {options.method!r}")
    return u


def s_map(
    a_op: DiscreteOperator,
    f: GridFunction,
    phi: Callable[[GridFunction], GridFunction],
    phi_arg: GridFunction,
    options: VISolverOptions | None = None,
) -> GridFunction:
    """Solution map S(f, phi_arg): the VI solution with obstacle Phi(phi_arg)."""
    options = options or VISolverOptions()
    psi = phi(phi_arg)
    return _solve(ObstacleProblem(a_op, f, psi), options)


def s0_map(
    a_op: DiscreteOperator,
    g: GridFunction,
    options: VISolverOptions | None = None,
) -> GridFunction:
    """Zero-lower-obstacle map S0(g): z >= 0 with <Az - g, z - v> <= 0.

    Reduced to the upper-obstacle solver by the sign flip w = -z, which
    solves the upper problem with forcing -g and obstacle 0.
    """
    options = options or VISolverOptions()
    grid = a_op.grid
    zero = GridFunction(grid, np.zeros(grid.node_count))
    neg_g = GridFunction(grid, -g.values)
    w = _solve(ObstacleProblem(a_op, neg_g, zero), options)
    return GridFunction(grid, -w.values)


def complementarity_residual(problem: ObstacleProblem, u: GridFunction) -> float:
    """Max-norm complementarity defect: max_i |min(psi_i - u_i, (f - Au)_i)|.

    Zero for an exact solution of the upper-obstacle VI.
    """
    if u.grid != problem.a_op.grid:
        raise ValueError("solution and problem live on different grids")
    slack = problem.psi.values - u.values
    multiplier = problem.f.values - problem.a_op.matrix @ u.values
    return float(np.max(np.abs(np.minimum(slack, multiplier))))
