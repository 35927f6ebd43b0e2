"""Directional derivatives of the QVI solution map with respect to forcing.

Three routes to the derivative are kept separate on purpose:

* :func:`derivative_pde_solve` -- the smoothed-penalty PDE
  (A + alpha * max_g'(0, u - y)) w = d, which holds the mould fixed;
* :func:`coupled_derivative_solve` -- the full linearization of the coupled
  thermoforming system, which lets the mould respond;
* :func:`alpha_iteration` -- the abstract critical-cone recursion
  alpha_n = Phi'(u)(alpha_{n-1}) + delta_n, where delta_n solves a VI on the
  cone of directions that stay feasible to first order.

``difference_quotient_check`` and ``expansion_validation`` measure each
route against perturbed nonlinear solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import DiscreteOperator, Grid, GridFunction, l2_norm, vector_l2_norm
from .obstacle_vi import SolveError, psor_sweeps
from .qvi_core import QVIProblem, perturbed_selection
from .thermoforming import (
    ThermoformingConfig,
    ThermoformingState,
    assembly_for,
    coupled_newton,
    g_prime,
    default_initial_state,
)


@dataclass(frozen=True)
class SmoothedMax:
    """C^1 smoothing of max(0, .): quadratic blend on [-gamma, gamma].

    value(r) = 0 for r <= -gamma, (r + gamma)^2 / (4 gamma) on the blend,
    r for r >= gamma; the derivative is monotone with range [0, 1].
    """

    gamma: float = 1e-5

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("smoothing half-width gamma must be positive")

    def value(self, r):
        r = np.asarray(r, dtype=np.float64)
        out = np.where(
            r <= -self.gamma,
            0.0,
            np.where(r >= self.gamma, r, (r + self.gamma) ** 2 / (4.0 * self.gamma)),
        )
        return float(out) if out.ndim == 0 else out

    def prime(self, r):
        r = np.asarray(r, dtype=np.float64)
        out = np.clip((r + self.gamma) / (2.0 * self.gamma), 0.0, 1.0)
        return float(out) if out.ndim == 0 else out


@dataclass
class CriticalConeSpec:
    """Partition of the coincidence set by the sign of the residual A u - f."""

    strongly_active: np.ndarray
    biactive: np.ndarray
    tol_act: float
    tol_res: float

    def __post_init__(self):
        if np.any(self.strongly_active & self.biactive):
            raise ValueError("strongly active and biactive sets must be disjoint")

    @property
    def coincidence(self) -> np.ndarray:
        return self.strongly_active | self.biactive

    @property
    def strict_complementarity(self) -> bool:
        return not bool(np.any(self.biactive))


def indicator_right_half(grid: Grid) -> GridFunction:
    """Characteristic function of {x > 1/2}, the reference direction."""
    return GridFunction(grid, (grid.coords()[:, 0] > 0.5).astype(np.float64))


def build_critical_cone(
    u: GridFunction,
    phi_u: GridFunction,
    a_op: DiscreteOperator,
    f: GridFunction,
    tol_act: float | None = None,
    tol_res: float | None = None,
) -> CriticalConeSpec:
    """Classify nodes of an exact-constraint solution u of the VI at Phi(u).

    Coincidence nodes have phi_u - u <= tol_act; among them, those with
    |A u - f| > tol_res are strongly active (the derivative is pinned there)
    and the rest are biactive (the derivative is only sign-constrained).
    """
    if tol_act is None:
        tol_act = 1e-8 * (1.0 + float(np.max(np.abs(phi_u.values))))
    if tol_res is None:
        tol_res = 1e-6 * (1.0 + float(np.max(np.abs(f.values))))
    coincidence = (phi_u.values - u.values) <= tol_act
    resid = np.abs(a_op.matrix @ u.values - f.values)
    strongly = coincidence & (resid > tol_res)
    return CriticalConeSpec(
        strongly_active=strongly,
        biactive=coincidence & ~strongly,
        tol_act=tol_act,
        tol_res=tol_res,
    )


def solve_cone_vi(
    a_op: DiscreteOperator,
    forcing: np.ndarray,
    cone: CriticalConeSpec,
    tol: float = 1e-13,
    omega: float = 1.5,
    max_sweeps: int | None = None,
) -> np.ndarray:
    """VI on the critical cone: delta = 0 on strongly active nodes,
    delta <= 0 on biactive nodes, unconstrained elsewhere.

    The pinned nodes are eliminated; the remaining principal submatrix is
    still an M-matrix, so projected SOR applies with obstacle 0 on the
    biactive nodes and +inf on the free ones.
    """
    grid = a_op.grid
    keep = ~cone.strongly_active
    delta = np.zeros(grid.node_count)
    if not np.any(keep):
        return delta
    sub = a_op.matrix[keep][:, keep].tocsr()
    psi = np.where(cone.biactive[keep], 0.0, np.inf)
    weight = np.sqrt(grid.h ** grid.dim)
    if max_sweeps is None:
        max_sweeps = 200 * grid.node_count + 20000
    start = np.minimum(np.zeros(int(np.count_nonzero(keep))), psi)
    sol, _ = psor_sweeps(sub, forcing[keep], psi, start, omega, tol, weight, max_sweeps)
    delta[keep] = sol
    return delta


def derivative_pde_solve(
    state: ThermoformingState,
    d: GridFunction,
    cfg: ThermoformingConfig,
    sm: SmoothedMax | None = None,
) -> GridFunction:
    """Smoothed-penalty derivative: solve (A + alpha*max_g'(0, u-y)) w = d.

    SPD system; solved by sparse factorization with one step of iterative
    refinement so the residual sits at the float64 evaluation floor.
    """
    sm = sm or SmoothedMax()
    asm = assembly_for(cfg)
    mat = _smoothed_penalty_matrix(state, cfg, sm)
    lu = splu(mat)
    w = lu.solve(d.values)
    w += lu.solve(d.values - mat @ w)
    return GridFunction(asm.grid_u, w)


def _smoothed_penalty_matrix(state, cfg, sm) -> sp.csc_matrix:
    asm = assembly_for(cfg)
    mp = sm.prime(state.u.values - state.mould.values)
    return (asm.a_op.matrix + cfg.alpha * sp.diags(mp)).tocsc()


def derivative_residual(
    state: ThermoformingState,
    w: GridFunction,
    d: GridFunction,
    cfg: ThermoformingConfig,
    sm: SmoothedMax | None = None,
) -> dict:
    """Absolute and backward-relative residual of the derivative PDE."""
    sm = sm or SmoothedMax()
    asm = assembly_for(cfg)
    mat = _smoothed_penalty_matrix(state, cfg, sm)
    res = mat @ w.values - d.values
    absolute = vector_l2_norm(res, asm.grid_u)
    scale = vector_l2_norm(np.abs(mat) @ np.abs(w.values) + np.abs(d.values), asm.grid_u)
    return {"absolute": absolute, "relative": absolute / scale if scale else 0.0}


def difference_quotient_check(
    cfg: ThermoformingConfig,
    d: GridFunction,
    epsilon: float = 1e-5,
    base: ThermoformingState | None = None,
    w: GridFunction | None = None,
    sm: SmoothedMax | None = None,
) -> tuple[GridFunction, float]:
    """Compare the derivative PDE against (u(f + eps d) - u(f)) / eps.

    Both coupled solves start from the reference initial iterate. Returns
    the quotient and its discrete-L2 deviation from the derivative PDE
    solution.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    asm = assembly_for(cfg)
    if base is None:
        base, _ = coupled_newton(cfg)
    if w is None:
        w = derivative_pde_solve(base, d, cfg, sm)
    perturbed, _ = coupled_newton(
        cfg, init=default_initial_state(cfg), forcing=asm.f + epsilon * d.values
    )
    quotient = GridFunction(
        asm.grid_u, (perturbed.u.values - base.u.values) / epsilon
    )
    deviation = l2_norm(quotient - w)
    return quotient, deviation


@dataclass
class CoupledDerivative:
    """Mould-coupled sensitivity (w, tau, z) and its gap to the partial PDE."""

    w: GridFunction
    tau: GridFunction
    z: GridFunction
    partial_gap: float


def coupled_derivative_solve(
    state: ThermoformingState,
    d: GridFunction,
    cfg: ThermoformingConfig,
    sm: SmoothedMax | None = None,
) -> CoupledDerivative:
    """Full linearization of the coupled system: solve F'(u,T,y)(w,tau,z) =
    (d, 0, 0) with the smoothed penalty derivative in the membrane row.

    Unlike :func:`derivative_pde_solve` the mould responds through tau and
    z = L tau; the reported gap quantifies what holding the mould fixed
    loses.
    """
    sm = sm or SmoothedMax()
    asm = assembly_for(cfg)
    u, y = state.u.values, state.mould.values
    mp = sm.prime(u - y)
    gp = g_prime(asm.extend(y - u), cfg.kappa, cfg.s)
    alpha_dm = cfg.alpha * sp.diags(mp)
    gp_e = sp.diags(gp) @ asm.e_mat
    p_r = sp.diags(cfg.c_l * asm.rho_u) @ asm.r_mat
    eye_d = sp.identity(asm.grid_u.node_count, format="csr")
    jac = sp.bmat(
        [
            [asm.a_op.matrix + alpha_dm, None, -alpha_dm],
            [gp_e, asm.m_op.matrix, -gp_e],
            [None, -p_r, eye_d],
        ],
        format="csc",
    )
    nd, nn = asm.grid_u.node_count, asm.grid_t.node_count
    rhs = np.concatenate([d.values, np.zeros(nn), np.zeros(nd)])
    try:
        sol = splu(jac).solve(rhs)
    except RuntimeError as exc:
        raise SolveError(f"coupled derivative system is singular: {exc}") from exc
    w = GridFunction(asm.grid_u, sol[:nd])
    tau = GridFunction(asm.grid_t, sol[nd : nd + nn])
    z = GridFunction(asm.grid_u, sol[nd + nn :])
    w_partial = derivative_pde_solve(state, d, cfg, sm)
    return CoupledDerivative(w=w, tau=tau, z=z, partial_gap=l2_norm(w - w_partial))


@dataclass
class AlphaTrace:
    """History of the critical-cone recursion."""

    alphas: list[np.ndarray] = field(default_factory=list)
    deltas: list[np.ndarray] = field(default_factory=list)
    phi_primes: list[np.ndarray] = field(default_factory=list)
    gaps: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_iterations(self) -> int:
        return len(self.alphas)


def alpha_iteration(
    u: GridFunction,
    d: GridFunction,
    qvi: QVIProblem,
    cone: CriticalConeSpec,
    phi_prime: Callable[[GridFunction], GridFunction],
    n_max: int = 200,
    tol: float = 1e-11,
    inner_tol: float = 1e-13,
) -> tuple[GridFunction, AlphaTrace]:
    """Critical-cone recursion for the QVI directional derivative.

    Starting from alpha_0 = 0, each step solves the cone VI for
    delta_n with forcing d - A Phi'(u)(alpha_{n-1}) and sets
    alpha_n = Phi'(u)(alpha_{n-1}) + delta_n. The iterates must be
    nondecreasing and nonnegative; a violation beyond 1e-10 is a hard error.
    Stops when the successive discrete-L2 gap drops below ``tol``.
    """
    if np.min(d.values) < 0:
        raise ValueError("direction must be nonnegative")
    grid = qvi.a_op.grid
    trace = AlphaTrace()
    alpha_prev = np.zeros(grid.node_count)
    for n in range(1, n_max + 1):
        pa = phi_prime(GridFunction(grid, alpha_prev))
        forcing = d.values - qvi.a_op.matrix @ pa.values
        delta = solve_cone_vi(qvi.a_op, forcing, cone, tol=inner_tol)
        alpha = pa.values + delta
        worst_neg = float(np.min(alpha))
        worst_mono = float(np.min(alpha - alpha_prev))
        if worst_neg < -1e-10 or worst_mono < -1e-10:
            raise SolveError(
                "alpha iteration lost monotonicity or nonnegativity "
                f"(min alpha {worst_neg:.3e}, min step {worst_mono:.3e})"
            )
        trace.alphas.append(alpha)
        trace.deltas.append(delta)
        trace.phi_primes.append(pa.values)
        gap = vector_l2_norm(alpha - alpha_prev, grid)
        trace.gaps.append(gap)
        alpha_prev = alpha
        if gap < tol:
            trace.converged = True
            return GridFunction(grid, alpha), trace
    raise SolveError(
        f"alpha iteration did not converge in {n_max} steps; "
        f"last gap {trace.gaps[-1]:.3e}",
        residual_history=trace.gaps,
    )


def expansion_validation(
    u: GridFunction,
    d: GridFunction,
    qvi: QVIProblem,
    alpha: GridFunction,
    t_list: list[float],
    selection_tol: float = 1e-12,
    options=None,
) -> list[dict]:
    """Measure r(t) = ||q(t) - u - t*alpha|| / t along a sweep of t.

    q(t) is the monotone selection started from u; r(t) decreasing to zero
    is the computational signature of the first-order expansion.
    """
    rows = []
    for t in t_list:
        q_t, _ = perturbed_selection(
            qvi, d, t, u, tol=selection_tol, options=options
        )
        resid = q_t.values - u.values - t * alpha.values
        rows.append({"t": t, "ratio": vector_l2_norm(resid, u.grid) / t})
    return rows


def coincidence_lemma_checks(
    u: GridFunction,
    trace: AlphaTrace,
    cone: CriticalConeSpec,
    phi_prime: Callable[[GridFunction], GridFunction] | None = None,
    superposition: bool = False,
    tol: float = 1e-10,
) -> dict:
    """Discrete analogues of the coincidence-set identities.

    Always checked: alpha_1 vanishes on the coincidence set and
    Phi'(u)(alpha_n) >= 0 everywhere. The identity
    delta_n = -Phi'(u)(alpha_{n-1}) on the coincidence set holds only for
    superposition obstacle mappings and is marked skipped otherwise.
    """
    mask = cone.coincidence
    alpha1_max = float(np.max(np.abs(trace.alphas[0][mask]))) if mask.any() else 0.0
    phi_prime_min = min(
        (float(np.min(p)) for p in trace.phi_primes), default=0.0
    )
    report = {
        "alpha1_max_on_coincidence": alpha1_max,
        "alpha1_vanishes": alpha1_max <= tol,
        "phi_prime_min": phi_prime_min,
        "phi_prime_nonnegative": phi_prime_min >= -tol,
        "superposition_checked": bool(superposition),
    }
    if superposition and mask.any():
        worst = 0.0
        for delta, pa in zip(trace.deltas[1:], trace.phi_primes[1:]):
            worst = max(worst, float(np.max(np.abs(delta[mask] + pa[mask]))))
        report["delta_identity_max_defect"] = worst
        report["delta_identity_holds"] = worst <= tol
    else:
        report["delta_identity_max_defect"] = None
        report["delta_identity_holds"] = None
    return report
