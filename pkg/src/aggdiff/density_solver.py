"""Time integration of the radial density equation on the ball with no flux.

The update mirrors the constructive existence argument for the continuum
problem: the diffusion nonlinearity may be the exact ``s^m`` or a uniformly
elliptic ladder member ``Phi_k``; each time step solves the equation with a
frozen drift, and the nonlocal drift is fixed-pointed per step by Picard
iteration (the small-horizon contraction of the continuum proof becomes a
small-``dt`` contraction).

The spatial scheme is a conservative finite volume method in the volume
variable: the per-edge rate of mass transfer is

    Q_j = kappa(v_j)^2 [ (Phi(rho_j) - Phi(rho_{j-1}))/dv + rho_upwind * E_j ]

with ``rho`` upwinded by the sign of the drift ``E_j`` and both boundary
edges carrying zero flux, so total mass telescopes exactly.  ``Q_j`` is also
``dM/dt`` at edge ``j``, which keeps this solver and the mass-equation solver
consistent by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .model import (
    DensityState,
    PotentialSpec,
    VolumetricGrid,
    diffusion_for,
    volumetric_drift,
)


class CFLError(RuntimeError):
    """Explicit step rejected; ``suggested_dt`` satisfies the CFL bound."""

    def __init__(self, dt: float, suggested_dt: float):
        super().__init__(
            f"explicit step dt={dt:.3e} violates the CFL bound; "
            f"suggested dt={suggested_dt:.3e}")
        self.suggested_dt = suggested_dt


class NewtonError(RuntimeError):
    """Implicit solve did not converge; carries the last mass residual."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"Newton did not converge after {iterations} iterations "
            f"(mass residual {residual:.3e})")
        self.residual = residual


class PicardError(RuntimeError):
    """Drift fixed point did not converge; carries the last L1 residual."""

    def __init__(self, residual: float, iterations: int):
        super().__init__(
            f"Picard drift iteration did not converge after {iterations} "
            f"iterations (L1 residual {residual:.3e})")
        self.residual = residual


class SolverError(RuntimeError):
    """A step failed even after exhausting the dt-halving retry budget."""


@dataclass
class SolverConfig:
    """Knobs of the density solver.

    ``rho_floor`` only guards derivative evaluations (Jacobian entries, CFL
    estimates, entropy-variable diagnostics); fluxes always use ``Phi(rho)``
    itself, which is continuous at vacuum.  ``k_reg=None`` selects the exact
    ``s^m`` nonlinearity, an integer selects the ladder member ``Phi_k``.
    """

    dt: float = 1e-3
    cfl_safety: float = 0.8
    picard_tol: float = 1e-10
    picard_max_iter: int = 30
    rho_floor: float = 1e-12
    k_reg: float | None = None
    method: str = "implicit"
    newton_tol: float = 1e-13
    newton_max_iter: int = 60
    max_step_retries: int = 14

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must be in (0,1]")
        if self.picard_tol <= 0:
            raise ValueError("picard_tol must be positive")
        if self.rho_floor < 0:
            raise ValueError("rho_floor must be nonnegative")
        if self.method not in ("implicit", "explicit"):
            raise ValueError("method must be 'implicit' or 'explicit'")

    def diffusion(self, m: float):
        return diffusion_for(m, self.k_reg)


@dataclass
class PicardInfo:
    iterations: int
    residuals: list[float] = field(default_factory=list)


@dataclass
class Trajectory:
    """Recorded states of one solve, with per-record diagnostics."""

    times: list[float]
    states: list[DensityState]
    diagnostics: list
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> VolumetricGrid:
        return self.states[0].grid

    def times_array(self) -> np.ndarray:
        return np.asarray(self.times)

    def mass_profiles(self):
        return [s.mass_profile() for s in self.states]


def _phi_signed(diff, s: np.ndarray) -> np.ndarray:
    """Odd extension of Phi; Newton iterates may transiently dip below 0."""
    a = np.abs(s)
    return np.sign(s) * diff.phi(a)


def _dphi_guarded(diff, s: np.ndarray, floor: float) -> np.ndarray:
    return diff.dphi(np.maximum(np.abs(s), max(floor, 1e-14)))


def edge_rates(rho: np.ndarray, drift_edges: np.ndarray, diff,
               grid: VolumetricGrid) -> np.ndarray:
    """Per-edge mass rates Q_j (= dM/dt at edge j); boundary edges are 0."""
    kap2 = grid.kappa_edges[1:-1] ** 2
    dv_face = 0.5 * (grid.dv[:-1] + grid.dv[1:])
    phi = _phi_signed(diff, rho)
    dphi_dv = (phi[1:] - phi[:-1]) / dv_face
    e = drift_edges[1:-1]
    upwind = np.where(e > 0.0, rho[1:], rho[:-1])
    q = np.zeros(grid.n_cells + 1)
    q[1:-1] = kap2 * (dphi_dv + upwind * e)
    return q


def cfl_dt(rho: np.ndarray, drift_edges: np.ndarray, diff, grid: VolumetricGrid,
           cfg: SolverConfig) -> float:
    """Largest stable explicit step: dt <= dv^2 / (kappa^2 (Phi' + |E| dv))."""
    dphi = _dphi_guarded(diff, rho, cfg.rho_floor)
    kap2 = grid.kappa_edges ** 2
    dv = grid.dv
    denom = (kap2[1:] * (dphi / dv + np.abs(drift_edges[1:]))
             + kap2[:-1] * (dphi / dv + np.abs(drift_edges[:-1])))
    with np.errstate(divide="ignore"):
        bounds = dv / np.maximum(denom, 1e-300)
    return cfg.cfl_safety * float(np.min(bounds))


def _step_explicit(state: DensityState, drift_edges: np.ndarray, dt: float,
                   cfg: SolverConfig, diff) -> DensityState:
    grid = state.grid
    allowed = cfl_dt(state.rho, drift_edges, diff, grid, cfg)
    if dt > allowed * (1.0 + 1e-12):
        raise CFLError(dt, allowed)
    q = edge_rates(state.rho, drift_edges, diff, grid)
    rho_new = state.rho + dt * (q[1:] - q[:-1]) / grid.dv
    if np.any(rho_new < 0.0):
        raise CFLError(dt, 0.5 * dt)
    return state.copy(t=state.t + dt, rho=rho_new)


def _newton_matrix(rho: np.ndarray, drift_edges: np.ndarray, dt: float,
                   cfg: SolverConfig, diff, grid: VolumetricGrid) -> np.ndarray:
    """Banded (3, n) Jacobian of the implicit residual; an M-matrix."""
    n = grid.n_cells
    dv = grid.dv
    dv_face = 0.5 * (dv[:-1] + dv[1:])
    kap2 = grid.kappa_edges[1:-1] ** 2
    e = drift_edges[1:-1]
    e_pos = np.maximum(e, 0.0)
    e_neg = np.minimum(e, 0.0)
    dphi = _dphi_guarded(diff, rho, cfg.rho_floor)

    # dQ_j/drho_right and dQ_j/drho_left at interior edges j=1..n-1
    dq_r = kap2 * (dphi[1:] / dv_face + e_pos)
    dq_l = kap2 * (-dphi[:-1] / dv_face + e_neg)

    ab = np.zeros((3, n))
    # diagonal: 1 - (dt/dv_i)(dQ_{i+1}/drho_i - dQ_i/drho_i)
    diag = np.ones(n)
    diag[:-1] -= dt / dv[:-1] * dq_l
    diag[1:] += dt / dv[1:] * dq_r
    # super-diagonal: -(dt/dv_i) dQ_{i+1}/drho_{i+1}
    upper = -dt / dv[:-1] * dq_r
    # sub-diagonal: +(dt/dv_i) dQ_i/drho_{i-1}
    lower = dt / dv[1:] * dq_l
    ab[0, 1:] = upper
    ab[1, :] = diag
    ab[2, :-1] = lower
    return ab


def _step_implicit(state: DensityState, drift_edges: np.ndarray, dt: float,
                   cfg: SolverConfig, diff) -> DensityState:
    grid = state.grid
    rho_old = state.rho
    mass0 = state.params.mass0
    x = rho_old.copy()

    def residual(y: np.ndarray) -> np.ndarray:
        q = edge_rates(y, drift_edges, diff, grid)
        return y - rho_old - dt * (q[1:] - q[:-1]) / grid.dv

    res = residual(x)
    res_mass = float(np.abs(res) @ grid.dv)
    # roundoff floor: the residual cannot beat float noise on the masses moved
    q0 = edge_rates(rho_old, drift_edges, diff, grid)
    turnover = mass0 + 2.0 * dt * float(np.sum(np.abs(q0)))
    tol = max(cfg.newton_tol * mass0, 64.0 * np.finfo(float).eps * turnover)
    for it in range(cfg.newton_max_iter):
        if res_mass <= tol:
            break
        ab = _newton_matrix(x, drift_edges, dt, cfg, diff, grid)
        try:
            delta = solve_banded((1, 1), ab, -res)
        except Exception as exc:  # singular Jacobian
            raise NewtonError(res_mass, it) from exc
        lam = 1.0
        for _ in range(30):
            x_try = x + lam * delta
            res_try = residual(x_try)
            res_try_mass = float(np.abs(res_try) @ grid.dv)
            if res_try_mass < res_mass or res_try_mass <= tol:
                x, res, res_mass = x_try, res_try, res_try_mass
                break
            lam *= 0.5
        else:
            raise NewtonError(res_mass, it)
    else:
        raise NewtonError(res_mass, cfg.newton_max_iter)

    # conservative polish: one explicit correction with the fluxes of the
    # converged iterate makes the cell masses telescope exactly
    x = x - residual(x)
    neg = x < 0.0
    if np.any(neg):
        worst = float(-x[neg].min())
        if worst > 100.0 * max(tol / grid.dv.min(), 1e-30):
            raise NewtonError(worst, cfg.newton_max_iter)
        x = np.maximum(x, 0.0)
    return state.copy(t=state.t + dt, rho=x)


def step_frozen_drift(state: DensityState, drift_edges: np.ndarray, dt: float,
                      cfg: SolverConfig) -> DensityState:
    """One conservative finite-volume step with the drift held fixed.

    ``drift_edges`` carries the volumetric drift at the ``n_cells + 1``
    edges; only interior edges move mass, so the boundary values are ignored
    (no-flux is hard-enforced).  Explicit mode rejects steps violating the
    CFL bound with a :class:`CFLError` carrying a usable ``suggested_dt``;
    implicit mode solves the backward-Euler system by damped Newton and
    raises :class:`NewtonError` with the residual on failure.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    drift_edges = np.asarray(drift_edges, dtype=float)
    if drift_edges.shape != (state.grid.n_cells + 1,):
        raise ValueError("drift must be given per edge")
    diff = cfg.diffusion(state.params.m)
    if cfg.method == "explicit":
        return _step_explicit(state, drift_edges, dt, cfg, diff)
    return _step_implicit(state, drift_edges, dt, cfg, diff)


def picard_drift_fixed_point(state: DensityState, pot: PotentialSpec, dt: float,
                             cfg: SolverConfig) -> tuple[DensityState, PicardInfo]:
    """Advance one step, fixed-pointing the nonlocal drift.

    Iterates ``rho^(j+1) = step(state, E[rho^(j)], dt)`` from
    ``rho^(0) = state`` until the L1 distance of successive iterates drops
    below ``picard_tol``.  The returned iteration count is the number of
    drift corrections performed (a rho-independent drift converges after
    one).  Raises :class:`PicardError` when the budget is exhausted; callers
    typically halve ``dt`` and retry, matching the contraction threshold
    shrinking with the step size.
    """
    grid = state.grid
    drift = volumetric_drift(state, pot, grid, where="edges")
    current = step_frozen_drift(state, drift, dt, cfg)
    if pot.W.is_zero:
        return current, PicardInfo(iterations=1, residuals=[0.0])

    residuals: list[float] = []
    for j in range(1, cfg.picard_max_iter + 1):
        drift = volumetric_drift(current, pot, grid, where="edges")
        nxt = step_frozen_drift(state, drift, dt, cfg)
        res = float(np.abs(nxt.rho - current.rho) @ grid.dv)
        residuals.append(res)
        current = nxt
        if res < cfg.picard_tol:
            return current, PicardInfo(iterations=j, residuals=residuals)
    raise PicardError(residuals[-1], cfg.picard_max_iter)


def solve_density(rho0: DensityState, pot: PotentialSpec, params, cfg: SolverConfig,
                  record_every: int = 1, frozen_drift=None,
                  stationary_tol: float | None = None) -> Trajectory:
    """March the density equation on ``[0, T]`` and record a trajectory.

    Every recorded state conserves the initial discrete mass to the mode's
    tolerance (telescoping fluxes; the implicit mode finishes each step with
    a conservative correction) and stays nonnegative.  Step failures halve
    ``dt`` for the failing step and retry within a budget, after which a
    :class:`SolverError` surfaces the underlying cause.

    ``frozen_drift`` bypasses the Picard iteration: an array fixes the edge
    drift for the whole run, a callable is evaluated as ``drift(t)`` at the
    start of each step.  ``stationary_tol`` stops early once
    ``||rho^{n+1} - rho^n||_L1 / dt`` falls below it.
    """
    from . import energetics  # local import; energetics only needs model

    grid = rho0.grid
    state = rho0.copy()
    state.t = 0.0

    def diagnostics(s: DensityState):
        return energetics.diagnostics_record(s, pot, rho_floor=cfg.rho_floor)

    times = [0.0]
    states = [state.copy()]
    diags = [diagnostics(state)]
    meta = {"steps": 0, "retries": 0, "picard_iterations": 0,
            "stationary_reached": False}

    static_drift = None
    if frozen_drift is None and pot.W.is_zero:
        static_drift = volumetric_drift(state, pot, grid, where="edges")

    t_end = params.T
    steps_since_record = 0
    while state.t < t_end * (1.0 - 1e-14):
        dt = min(cfg.dt, t_end - state.t)
        if cfg.method == "explicit":
            drift_now = _current_drift(state, pot, grid, frozen_drift, static_drift)
            diff = cfg.diffusion(params.m)
            dt = min(dt, cfl_dt(state.rho, drift_now, diff, grid, cfg))
        prev = state
        for attempt in range(cfg.max_step_retries + 1):
            try:
                if frozen_drift is not None or static_drift is not None:
                    drift_now = _current_drift(state, pot, grid, frozen_drift,
                                               static_drift)
                    state = step_frozen_drift(state, drift_now, dt, cfg)
                else:
                    state, info = picard_drift_fixed_point(state, pot, dt, cfg)
                    meta["picard_iterations"] += info.iterations
                break
            except (CFLError, NewtonError, PicardError) as exc:
                meta["retries"] += 1
                dt *= 0.5
                if attempt == cfg.max_step_retries:
                    raise SolverError(
                        f"step at t={state.t:.6g} failed after "
                        f"{cfg.max_step_retries} dt halvings: {exc}") from exc
        meta["steps"] += 1
        steps_since_record += 1
        if steps_since_record >= record_every or state.t >= t_end * (1.0 - 1e-14):
            times.append(state.t)
            states.append(state.copy())
            diags.append(diagnostics(state))
            steps_since_record = 0
        if stationary_tol is not None:
            rate = float(np.abs(state.rho - prev.rho) @ grid.dv) / dt
            if rate < stationary_tol:
                meta["stationary_reached"] = True
                if times[-1] != state.t:
                    times.append(state.t)
                    states.append(state.copy())
                    diags.append(diagnostics(state))
                break
    return Trajectory(times=times, states=states, diagnostics=diags, meta=meta)


def _current_drift(state, pot, grid, frozen_drift, static_drift):
    if frozen_drift is not None:
        if callable(frozen_drift):
            return np.asarray(frozen_drift(state.t), dtype=float)
        return np.asarray(frozen_drift, dtype=float)
    return static_drift


def l1_contraction_gap(traj_a: Trajectory, traj_b: Trajectory) -> np.ndarray:
    """``t -> int (rho_a - rho_b)_+ dv`` at the common recorded times.

    With equal drifts the monotone scheme keeps this nonincreasing, the
    discrete form of the L1 contraction/comparison principle.  Raises
    ``ValueError`` on mismatched grids or recording times.
    """
    if not traj_a.grid.same_geometry(traj_b.grid):
        raise ValueError("trajectories live on different grids")
    ta, tb = traj_a.times_array(), traj_b.times_array()
    if ta.shape != tb.shape or not np.allclose(ta, tb, rtol=1e-12, atol=1e-14):
        raise ValueError("trajectories recorded at different times")
    dv = traj_a.grid.dv
    return np.array([
        float(np.maximum(sa.rho - sb.rho, 0.0) @ dv)
        for sa, sb in zip(traj_a.states, traj_b.states)
    ])
