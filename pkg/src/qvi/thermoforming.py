"""Thermoforming: a membrane pressed against a mould that grows with heat.

The membrane u (clamped, Dirichlet grid) satisfies a penalized obstacle
equation against the mould y; the mould temperature T (insulated, Neumann
grid) diffuses with a heat-exchange source g(y - u) that switches off once
membrane and mould separate by more than s; the mould grows affinely,
y = Phi0 + L T with (Lv)(x) = c_l * rho(x) * v(x) for a bump rho vanishing
on the boundary. The coupled system

    A u + alpha * max(0, u - y) - f = 0
    (k I - Lap_N) T - g(y - u)      = 0
    y - Phi0 - L T                  = 0

is solved by a semismooth Newton method; ``phi_map`` exposes the obstacle
mapping u -> Phi0 + L T(u) for the QVI fixed-point solver, and
``phi_derivative_apply`` its derivative via the linearized temperature PDE.

The membrane grid and the temperature grid share their interior nodes;
coupling terms are moved between grids by zero-extension and restriction
(membrane, mould and their gap all vanish on the boundary).
"""

from __future__ import annotations

import functools
import json
import time
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import (
    BC_DIRICHLET,
    BC_NEUMANN,
    DiscreteOperator,
    Grid,
    GridFunction,
    assemble_dirichlet_operator,
    assemble_neumann_operator,
    vector_l2_norm,
)
from .obstacle_vi import SolveError, SolveReport, active_set_for

RHO_GRAD_BOUND = np.sqrt(50.0)


@dataclass(frozen=True)
class ThermoformingConfig:
    """Model and solver parameters; the defaults reproduce the reference run."""

    k: float = 1.0
    alpha: float = 1e8
    kappa: float = 10.0
    s: float = 1.0
    c_l: float = 5.25e-3
    f_const: float = 1e2
    grid_n: int = 64
    newton_tol: float = 4e-9
    delta_n: float = 0.1
    max_newton_iter: int = 50

    def __post_init__(self):
        for name in ("k", "alpha", "s", "c_l"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not 0.0 <= self.delta_n <= 1.0:
            raise ValueError(f"delta_n must lie in [0, 1], got {self.delta_n}")
        if self.grid_n < 2:
            raise ValueError("grid_n must be at least 2")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class ThermoformingState:
    """Membrane u, temperature T and mould y = Phi(u) after a coupled solve."""

    u: GridFunction
    temperature: GridFunction
    mould: GridFunction


def g_eval(r, kappa: float = 10.0, s: float = 1.0):
    """Heat-exchange profile: kappa at contact, 0 beyond separation s.

    Piecewise C^1 spline: kappa for r <= 0; kappa - 8 kappa r^2/(3 s^2) on
    (0, s/4]; 7 kappa/6 - 4 kappa r/(3 s) on (s/4, 3s/4]; 8 kappa (s-r)^2 /
    (3 s^2) on (3s/4, s]; 0 for r >= s.
    """
    r = np.asarray(r, dtype=np.float64)
    conds = [
        r <= 0.0,
        r <= s / 4.0,
        r <= 3.0 * s / 4.0,
        r <= s,
    ]
    vals = [
        kappa,
        kappa - 8.0 * kappa * r**2 / (3.0 * s**2),
        7.0 * kappa / 6.0 - 4.0 * kappa * r / (3.0 * s),
        8.0 * kappa * (s - r) ** 2 / (3.0 * s**2),
    ]
    out = np.select(conds, vals, default=0.0)
    return float(out) if out.ndim == 0 else out


def g_prime(r, kappa: float = 10.0, s: float = 1.0):
    """Exact derivative of :func:`g_eval`; continuous, <= 0 everywhere."""
    r = np.asarray(r, dtype=np.float64)
    conds = [
        r <= 0.0,
        r <= s / 4.0,
        r <= 3.0 * s / 4.0,
        r <= s,
    ]
    vals = [
        0.0,
        -16.0 * kappa * r / (3.0 * s**2),
        -4.0 * kappa / (3.0 * s),
        -16.0 * kappa * (s - r) / (3.0 * s**2),
    ]
    out = np.select(conds, vals, default=0.0)
    return float(out) if out.ndim == 0 else out


@functools.lru_cache(maxsize=32)
def _bump_values(grid: Grid) -> tuple[np.ndarray, float]:
    """Nodal bump values and the sampled gradient-magnitude maximum."""
    coords = grid.coords()
    center = 0.5
    if grid.dim == 1:
        dist = np.abs(coords[:, 0] - center)
    else:
        dist = np.hypot(coords[:, 0] - center, coords[:, 1] - center)
    r = 2.0 * dist
    inside = r < 1.0
    vals = np.zeros(grid.node_count)
    rr = r[inside]
    vals[inside] = np.exp(1.0 - 1.0 / (1.0 - rr**2))
    # |grad rho| = 2 |rho'(r)| with rho'(r) = rho(r) * (-2 r / (1 - r^2)^2).
    grad = np.zeros(grid.node_count)
    grad[inside] = vals[inside] * 2.0 * rr / (1.0 - rr**2) ** 2 * 2.0
    return vals, float(np.max(grad))


def bump_rho(grid: Grid) -> GridFunction:
    """Radial exponential bump: 1 at the center, 0 on the boundary.

    The sampled gradient bound sqrt(50) is asserted at assembly; a violation
    would invalidate the operator-norm estimates used by
    :func:`check_assumptions`.
    """
    vals, grad_max = _bump_values(grid)
    if grad_max > RHO_GRAD_BOUND:
        raise RuntimeError(
            f"bump gradient bound violated: {grad_max:.4f} > sqrt(50); "
            "construction bug"
        )
    return GridFunction(grid, vals.copy())


def l_apply(v: GridFunction, c_l: float) -> GridFunction:
    """Mould-growth operator: nodewise multiplication by c_l * rho.

    Since rho vanishes on the boundary, L maps any temperature field into a
    zero-boundary function.
    """
    rho = bump_rho(v.grid)
    return GridFunction(v.grid, c_l * rho.values * v.values)


def trapezoid_profile(indices: np.ndarray, n: int) -> np.ndarray:
    """Trapezoid ramp over per-axis node indices: 0 -> 1 on [n/10, 3n/10],
    plateau, 1 -> 0 on [7n/10, 9n/10]."""
    xi = np.asarray(indices, dtype=np.float64) / n
    up = 5.0 * (xi - 0.1)
    down = 1.0 - 5.0 * (xi - 0.7)
    vals = np.where(
        (xi >= 0.1) & (xi <= 0.3),
        up,
        np.where(
            (xi > 0.3) & (xi < 0.7),
            1.0,
            np.where((xi >= 0.7) & (xi <= 0.9), down, 0.0),
        ),
    )
    return vals


def mould_phi0(grid: Grid) -> GridFunction:
    """Initial mould: tensor product of two trapezoid profiles."""
    if grid.dim != 2:
        raise ValueError("the initial mould is defined on a 2D grid")
    n = grid.n_per_axis
    if grid.bc == BC_DIRICHLET:
        idx = np.arange(1, n + 1)
    else:
        idx = np.arange(0, n + 2)
    w = trapezoid_profile(idx, n)
    vals = np.outer(w, w).ravel()  # row index j (y), column index i (x)
    return GridFunction(grid, vals)


class _Assembly:
    """Grids, operators and coupling maps shared by the thermoforming ops."""

    def __init__(self, cfg: ThermoformingConfig):
        self.cfg = cfg
        n = cfg.grid_n
        self.grid_u = Grid(2, n, BC_DIRICHLET)
        self.grid_t = Grid(2, n, BC_NEUMANN)
        self.a_op = assemble_dirichlet_operator(self.grid_u)
        self.m_op = assemble_neumann_operator(self.grid_t, cfg.k)
        self.rho_u = bump_rho(self.grid_u).values
        self.rho_t = bump_rho(self.grid_t).values
        self.phi0_u = mould_phi0(self.grid_u).values
        self.f = np.full(self.grid_u.node_count, cfg.f_const)

        nd, m = n, n + 2
        inner = np.arange(1, n + 1)
        # flat index on the Neumann grid of interior node (i, j), x fastest
        jj, ii = np.meshgrid(inner, inner, indexing="ij")
        neumann_flat = (jj * m + ii).ravel()
        dirichlet_flat = np.arange(nd * nd)
        self.extend_idx = neumann_flat
        data = np.ones(nd * nd)
        self.e_mat = sp.csr_matrix(
            (data, (neumann_flat, dirichlet_flat)),
            shape=(self.grid_t.node_count, self.grid_u.node_count),
        )
        self.r_mat = self.e_mat.T.tocsr()
        self.phi0_t = self.e_mat @ self.phi0_u

    def extend(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid_t.node_count)
        out[self.extend_idx] = v
        return out

    def restrict(self, v: np.ndarray) -> np.ndarray:
        return v[self.extend_idx]


@functools.lru_cache(maxsize=8)
def assembly_for(cfg: ThermoformingConfig) -> _Assembly:
    return _Assembly(cfg)


def membrane_grid(cfg: ThermoformingConfig) -> Grid:
    return assembly_for(cfg).grid_u


def temperature_grid(cfg: ThermoformingConfig) -> Grid:
    return assembly_for(cfg).grid_t


def _residual_floor(m_mat: sp.csr_matrix, t: np.ndarray, source: np.ndarray, grid: Grid) -> float:
    # Round-off floor of evaluating M t - source in float64; the stiffness
    # rows carry O(1/h^2) entries so the residual cannot drop below this.
    abs_row = np.abs(m_mat) @ np.abs(t) + np.abs(source)
    return 8.0 * np.finfo(float).eps * vector_l2_norm(abs_row, grid)


def temperature_solve(
    u: GridFunction,
    cfg: ThermoformingConfig,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> GridFunction:
    """Solve the semilinear temperature equation for a fixed membrane.

    Newton iteration on (k I - Lap_N) T - g(L T + Phi0 - u) = 0; the Newton
    matrix stays an M-matrix because g' <= 0, so steps are well defined. A
    damped fixed-point fallback kicks in if Newton stalls. Converges to
    ``tol`` or to the float64 residual-evaluation floor, whichever is larger.
    """
    asm = assembly_for(cfg)
    if u.grid != asm.grid_u:
        raise ValueError("membrane does not live on the configured grid")
    m = asm.m_op.matrix
    m_lu = None
    u_t = asm.extend(u.values)
    t = np.zeros(asm.grid_t.node_count)

    def residual(tv):
        arg = cfg.c_l * asm.rho_t * tv + asm.phi0_t - u_t
        source = g_eval(arg, cfg.kappa, cfg.s)
        return arg, source, m @ tv - source

    arg, source, resid = residual(t)
    rnorm = vector_l2_norm(resid, asm.grid_t)
    for _ in range(max_iter):
        floor = _residual_floor(m, t, source, asm.grid_t)
        if rnorm <= max(tol, floor):
            return GridFunction(asm.grid_t, t)
        gp = g_prime(arg, cfg.kappa, cfg.s)
        jac = (m - sp.diags(gp * cfg.c_l * asm.rho_t)).tocsc()
        t_new = t + splu(jac).solve(-resid)
        arg_new, source_new, resid_new = residual(t_new)
        rnorm_new = vector_l2_norm(resid_new, asm.grid_t)
        if rnorm_new >= rnorm:
            # Newton overshoot: Picard step T <- M^{-1} g(...), contractive
            # since Lip(g) * c_l / k is small for admissible configs.
            if m_lu is None:
                m_lu = splu(m.tocsc())
            t_new = m_lu.solve(source)
            arg_new, source_new, resid_new = residual(t_new)
            rnorm_new = vector_l2_norm(resid_new, asm.grid_t)
        t, arg, source, resid, rnorm = t_new, arg_new, source_new, resid_new, rnorm_new
    raise SolveError(
        f"temperature solve did not reach tol {tol:.1e} in {max_iter} "
        f"iterations (last residual {rnorm:.3e})"
    )


def phi_map(u: GridFunction, cfg: ThermoformingConfig) -> GridFunction:
    """Obstacle mapping Phi(u) = Phi0 + L T(u) on the membrane grid."""
    asm = assembly_for(cfg)
    t = temperature_solve(u, cfg)
    mould = asm.phi0_u + cfg.c_l * asm.rho_u * asm.restrict(t.values)
    return GridFunction(asm.grid_u, mould)


def default_initial_state(cfg: ThermoformingConfig) -> ThermoformingState:
    """Reference initial iterate: (0.9 * Phi0, 0.2, 10)."""
    asm = assembly_for(cfg)
    return ThermoformingState(
        u=GridFunction(asm.grid_u, 0.9 * asm.phi0_u),
        temperature=GridFunction(asm.grid_t, np.full(asm.grid_t.node_count, 0.2)),
        mould=GridFunction(asm.grid_u, np.full(asm.grid_u.node_count, 10.0)),
    )


def coupled_residual(
    state: ThermoformingState,
    cfg: ThermoformingConfig,
    forcing: np.ndarray | None = None,
) -> np.ndarray:
    """Stacked residual (membrane, temperature, mould) of the penalized system."""
    asm = assembly_for(cfg)
    u, t, y = state.u.values, state.temperature.values, state.mould.values
    f = asm.f if forcing is None else forcing
    res_u = asm.a_op.matrix @ u + cfg.alpha * np.maximum(0.0, u - y) - f
    gap_t = asm.extend(y - u)
    res_t = asm.m_op.matrix @ t - g_eval(gap_t, cfg.kappa, cfg.s)
    res_y = y - asm.phi0_u - cfg.c_l * asm.rho_u * asm.restrict(t)
    return np.concatenate([res_u, res_t, res_y])


def stacked_norm(res: np.ndarray, cfg: ThermoformingConfig) -> float:
    """Discrete L2 norm of a stacked residual (both grids share h)."""
    asm = assembly_for(cfg)
    return float(asm.grid_u.h * np.linalg.norm(res))


def _max_newton_derivative(gap: np.ndarray, delta_n: float) -> np.ndarray:
    return np.where(gap > 0.0, 1.0, np.where(gap == 0.0, delta_n, 0.0))


def coupled_jacobian(
    state: ThermoformingState,
    cfg: ThermoformingConfig,
) -> sp.csc_matrix:
    """Newton derivative of the stacked system at the given state."""
    asm = assembly_for(cfg)
    u, y = state.u.values, state.mould.values
    dm = _max_newton_derivative(u - y, cfg.delta_n)
    gp = g_prime(asm.extend(y - u), cfg.kappa, cfg.s)
    alpha_dm = cfg.alpha * sp.diags(dm)
    gp_e = sp.diags(gp) @ asm.e_mat
    p_r = sp.diags(cfg.c_l * asm.rho_u) @ asm.r_mat
    eye_d = sp.identity(asm.grid_u.node_count, format="csr")
    return sp.bmat(
        [
            [asm.a_op.matrix + alpha_dm, None, -alpha_dm],
            [gp_e, asm.m_op.matrix, -gp_e],
            [None, -p_r, eye_d],
        ],
        format="csc",
    )


def coupled_newton(
    cfg: ThermoformingConfig,
    init: ThermoformingState | None = None,
    forcing: np.ndarray | None = None,
    iterate_sink=None,
) -> tuple[ThermoformingState, SolveReport]:
    """Semismooth Newton on the stacked penalized system.

    Stops once the stacked discrete-L2 residual drops below cfg.newton_tol;
    exceeding the iteration cap raises with the residual history attached.
    ``iterate_sink``, if given, is called with each post-step state.
    """
    t0 = time.perf_counter()
    asm = assembly_for(cfg)
    state = init or default_initial_state(cfg)
    state = ThermoformingState(state.u.copy(), state.temperature.copy(), state.mould.copy())
    nd = asm.grid_u.node_count
    nn = asm.grid_t.node_count
    history: list[float] = []
    for _ in range(cfg.max_newton_iter + 1):
        res = coupled_residual(state, cfg, forcing=forcing)
        rnorm = stacked_norm(res, cfg)
        history.append(rnorm)
        if rnorm < cfg.newton_tol:
            report = SolveReport(
                iterations=len(history) - 1,
                residual_history=history,
                final_residual=rnorm,
                active_set=active_set_for(state.u, state.mould),
                wall_time=time.perf_counter() - t0,
            )
            return state, report
        if len(history) == cfg.max_newton_iter + 1:
            break
        jac = coupled_jacobian(state, cfg)
        step = splu(jac).solve(-res)
        state = ThermoformingState(
            u=GridFunction(asm.grid_u, state.u.values + step[:nd]),
            temperature=GridFunction(asm.grid_t, state.temperature.values + step[nd : nd + nn]),
            mould=GridFunction(asm.grid_u, state.mould.values + step[nd + nn :]),
        )
        if iterate_sink is not None:
            iterate_sink(state)
    raise SolveError(
        f"coupled Newton exceeded {cfg.max_newton_iter} iterations; "
        f"final residual {history[-1]:.3e}",
        residual_history=history,
    )


@dataclass
class AssumptionReport:
    """Margins of the smallness conditions behind the sensitivity theory."""

    gprime_max: float
    lip_g: float
    l_norm_wv_bound: float
    l_norm_wh_bound: float
    x1_value: float
    x1_pass: bool
    x2_pass: bool
    cor_bound_value: float
    cor_bound_pass: bool

    def all_pass(self) -> bool:
        return self.x1_pass and self.x2_pass and self.cor_bound_pass

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def check_assumptions(cfg: ThermoformingConfig) -> AssumptionReport:
    """Evaluate the analytic smallness conditions for the configured model.

    Uses ||g'||_inf = 4 kappa / (3 s) and the analytic operator-norm bound
    ||L|| <= c_l * sqrt(||rho||_inf^2 + ||grad rho||_inf^2) <= c_l*sqrt(51)
    rather than a numerical norm, mirroring how the bound is derived.
    """
    gprime_max = 4.0 * cfg.kappa / (3.0 * cfg.s)
    l_wv = cfg.c_l * np.sqrt(1.0 + RHO_GRAD_BOUND**2)
    l_wh = cfg.c_l  # multiplication bound: ||L v||_H <= c_l ||rho||_inf ||v||_H
    mink = min(1.0, cfg.k)
    x1_value = gprime_max * l_wh
    cor_value = gprime_max * l_wv / mink
    return AssumptionReport(
        gprime_max=gprime_max,
        lip_g=gprime_max,
        l_norm_wv_bound=l_wv,
        l_norm_wh_bound=l_wh,
        x1_value=x1_value,
        x1_pass=bool(x1_value < mink),
        x2_pass=True,  # v * (c_l rho v) >= 0 holds structurally since rho >= 0
        cor_bound_value=cor_value,
        cor_bound_pass=bool(cor_value < 0.5),
    )


def phi_derivative_apply(
    u: GridFunction,
    d: GridFunction,
    cfg: ThermoformingConfig,
) -> GridFunction:
    """Derivative of the obstacle mapping: Phi'(u)(d) = -L delta.

    delta solves the linearized temperature equation
    (k I - Lap_N) delta - g'(Phi(u) - u) L delta = g'(Phi(u) - u) d,
    which is uniquely solvable since g' <= 0 keeps the matrix an M-matrix.
    Linear in d.
    """
    asm = assembly_for(cfg)
    t = temperature_solve(u, cfg)
    arg = cfg.c_l * asm.rho_t * t.values + asm.phi0_t - asm.extend(u.values)
    gp = g_prime(arg, cfg.kappa, cfg.s)
    mat = (asm.m_op.matrix - sp.diags(gp * cfg.c_l * asm.rho_t)).tocsc()
    delta = splu(mat).solve(gp * asm.extend(d.values))
    return GridFunction(asm.grid_u, -cfg.c_l * asm.rho_u * asm.restrict(delta))


def beltrami_flatness_diagnostic(w: GridFunction, h_field: GridFunction) -> float:
    """Relative error of replacing the surface Laplacian by the flat one.

    For 1D profiles w (mould height) and H (surface field) the
    curvature-corrected Laplacian is
    H'' / (1 + w'^2) - w' w'' H' / (1 + w'^2)^2; the return value is
    ||Lap_Gamma H - Lap H|| / ||Lap H|| over the interior nodes, zero when
    the mould is flat.
    """
    if w.grid != h_field.grid or w.grid.dim != 1:
        raise ValueError("flatness diagnostic expects two 1D profiles on one grid")
    h = w.grid.h
    wv, hv = w.values, h_field.values
    if wv.size < 3:
        raise ValueError("profile too short for central differences")
    w1 = (wv[2:] - wv[:-2]) / (2.0 * h)
    w2 = (wv[2:] - 2.0 * wv[1:-1] + wv[:-2]) / h**2
    h1 = (hv[2:] - hv[:-2]) / (2.0 * h)
    h2 = (hv[2:] - 2.0 * hv[1:-1] + hv[:-2]) / h**2
    denom = 1.0 + w1**2
    lap_gamma = h2 / denom - w1 * w2 * h1 / denom**2
    ref = np.linalg.norm(h2)
    if ref == 0.0:
        return 0.0
    return float(np.linalg.norm(lap_gamma - h2) / ref)
