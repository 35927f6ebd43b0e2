"""Quasi-variational inequality solver via the monotone VI fixed point.

For an increasing obstacle mapping Phi with Phi(0) >= 0 and nonnegative
forcing, the iteration q_n = S(f, q_{n-1}) started from a subsolution is
nodewise increasing and bounded above by the unconstrained solution
q_bar = A^{-1} f, so it converges to a QVI solution. The same machinery run
with forcing f + t*d and started from a base solution u supplies the
selection q(t) in [u, q_bar(t)] used by the sensitivity analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import DiscreteOperator, GridFunction, l2_norm, linear_solve
from .obstacle_vi import SolveError, VISolverOptions, s_map

#: slack used for the numerical subsolution / bracketing checks
BRACKET_SLACK = 1e-10
#: relative tolerance on nodewise monotonicity of the iterates
MONOTONE_RTOL = 1e-12


@dataclass
class QVIProblem:
    """Operator, forcing and obstacle mapping; Phi must be increasing."""

    a_op: DiscreteOperator
    f: GridFunction
    phi: Callable[[GridFunction], GridFunction]
    label: str = ""

    def __post_init__(self):
        if self.a_op.grid != self.f.grid:
            raise ValueError("operator and forcing live on different grids")
        zero = GridFunction(self.f.grid, np.zeros(self.f.grid.node_count))
        phi0 = self.phi(zero)
        if np.min(phi0.values) < -BRACKET_SLACK:
            raise ValueError(
                "obstacle mapping violates Phi(0) >= 0 "
                f"(min {np.min(phi0.values):.3e})"
            )


@dataclass
class IterationTrace:
    iterates: list[GridFunction]
    monotone_violation: float
    converged: bool
    sup_bound: GridFunction
    gaps: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "iterate_norms": [l2_norm(q) for q in self.iterates],
                "gaps": self.gaps,
                "monotone_violation": self.monotone_violation,
                "converged": self.converged,
                "sup_bound_norm": l2_norm(self.sup_bound),
            }
        )


def solve_unconstrained(a_op: DiscreteOperator, f: GridFunction) -> GridFunction:
    """Solve A u_bar = f for nonnegative forcing; u_bar >= 0 by the maximum
    principle and serves as the supersolution bracket."""
    if np.min(f.values) < 0:
        raise ValueError("solve_unconstrained expects nonnegative forcing")
    return linear_solve(a_op, f)


def qvi_fixed_point(
    problem: QVIProblem,
    q0: GridFunction | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    options: VISolverOptions | None = None,
    increasing: bool = True,
) -> tuple[GridFunction, IterationTrace]:
    """Iterate q_n = S(f, q_{n-1}) until the successive gap drops below tol.

    ``q0`` defaults to zero (a subsolution for nonnegative forcing) in the
    increasing mode and to the unconstrained solution in the decreasing mode.
    The first iterate doubles as the numerical sub/supersolution check. A
    nodewise monotonicity violation beyond MONOTONE_RTOL * scale is a hard
    error since it indicates an inner-solver bug.
    """
    grid = problem.a_op.grid
    options = options or VISolverOptions(tol=min(1e-13, tol * 1e-3))
    q_bar = solve_unconstrained(problem.a_op, problem.f)
    if q0 is None:
        q0 = (
            GridFunction(grid, np.zeros(grid.node_count))
            if increasing
            else q_bar.copy()
        )
    scale = 1.0 + float(np.max(np.abs(q_bar.values)))
    sign = 1.0 if increasing else -1.0

    iterates = [q0.copy()]
    gaps: list[float] = []
    violation = 0.0
    converged = False
    q_prev = q0
    for n in range(max_iter):
        q_next = s_map(problem.a_op, problem.f, problem.phi, q_prev, options)
        step = sign * (q_next.values - q_prev.values)
        worst = float(np.min(step))
        if n == 0 and worst < -BRACKET_SLACK * scale:
            kind = "subsolution" if increasing else "supersolution"
            raise ValueError(
                f"starting iterate is not a {kind}: worst defect {worst:.3e}"
            )
        if n > 0:
            violation = min(violation, worst)
            if worst < -MONOTONE_RTOL * scale:
                raise SolveError(
                    f"fixed-point iterate lost monotonicity ({worst:.3e}); "
                    "this indicates an inner solver bug",
                    residual_history=gaps,
                )
        over = float(np.max(q_next.values - q_bar.values))
        if over > max(BRACKET_SLACK, tol) * scale:
            raise SolveError(
                f"iterate exceeded the unconstrained bound by {over:.3e}",
                residual_history=gaps,
            )
        gap = l2_norm(q_next - q_prev)
        gaps.append(gap)
        iterates.append(q_next.copy())
        q_prev = q_next
        if gap < tol:
            converged = True
            break
    trace = IterationTrace(
        iterates=iterates,
        monotone_violation=violation,
        converged=converged,
        sup_bound=q_bar,
        gaps=gaps,
    )
    if not converged:
        raise SolveError(
            f"QVI fixed point did not converge in {max_iter} iterations; "
            f"last gap {gaps[-1]:.3e}",
            residual_history=gaps,
        )
    return q_prev, trace


def perturbed_selection(
    problem: QVIProblem,
    d: GridFunction,
    t: float,
    u_base: GridFunction,
    tol: float = 1e-10,
    max_iter: int = 200,
    options: VISolverOptions | None = None,
) -> tuple[GridFunction, IterationTrace]:
    """Selection q(t) in Q(f + t*d) obtained by iterating from u_base.

    Requires d >= 0 nodewise; asserts the bracket u_base <= q(t) <= q_bar(t).
    For t == 0 (or d == 0) the base point is returned unchanged.
    """
    if np.min(d.values) < 0:
        raise ValueError("perturbation direction must be nonnegative")
    if t < 0:
        raise ValueError(f"perturbation size t must be nonnegative, got {t}")
    grid = problem.a_op.grid
    if t == 0.0 or not np.any(d.values):
        trace = IterationTrace(
            iterates=[u_base.copy()],
            monotone_violation=0.0,
            converged=True,
            sup_bound=solve_unconstrained(problem.a_op, problem.f),
            gaps=[],
        )
        return u_base.copy(), trace
    forcing = GridFunction(grid, problem.f.values + t * d.values)
    shifted = QVIProblem(problem.a_op, forcing, problem.phi, problem.label)
    q_t, trace = qvi_fixed_point(
        shifted, q0=u_base, tol=tol, max_iter=max_iter, options=options
    )
    scale = 1.0 + float(np.max(np.abs(trace.sup_bound.values)))
    low = float(np.min(q_t.values - u_base.values))
    if low < -max(BRACKET_SLACK, tol) * scale:
        raise SolveError(
            f"selection fell below the base solution by {low:.3e}",
            residual_history=trace.gaps,
        )
    return q_t, trace


def lipschitz_diagnostic(
    problem: QVIProblem,
    d: GridFunction,
    t_list: list[float],
    u_base: GridFunction | None = None,
    tol: float = 1e-10,
    options: VISolverOptions | None = None,
) -> list[dict]:
    """Difference-quotient ratios ||q(t) - u|| / t for each t.

    Bounded ratios are the computational face of the Lipschitz estimate for
    the solution map; the table is also a cheap sanity check before running
    the full derivative machinery.
    """
    if u_base is None:
        u_base, _ = qvi_fixed_point(problem, tol=tol, options=options)
    rows = []
    for t in t_list:
        q_t, _ = perturbed_selection(problem, d, t, u_base, tol=tol, options=options)
        ratio = 0.0 if t == 0 else l2_norm(q_t - u_base) / t
        rows.append({"t": t, "ratio": ratio})
    return rows
