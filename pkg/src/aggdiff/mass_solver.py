"""Direct integration of the cumulative-mass equation and its diagnostics.

The unknown is ``M(t, v)`` at the grid edges, nondecreasing in ``v`` with
``M(t, 0) = 0`` (or a held Dirac weight) and ``M(t, R_v) = mass0``.  The
scheme advances interior edges by

    dM_j/dt = kappa_j^2 [ (Phi(p_j) - Phi(p_{j-1}))/dv + p_upwind E_j ]

where ``p_i`` are the one-sided cell slopes (the cell densities), the
transport slope is upwinded by the sign of the drift, and both endpoint
values are pinned, so ``M(t, R_v) = mass0`` holds exactly.  This is the
update of the density solver read at the edges, which is what makes the two
solvers agree under refinement; it is monotone (each new edge value is
nondecreasing in every stencil value) under the explicit CFL bound, the
structure that viscosity-solution convergence rests on.  A backward-Euler
variant with the same stencil removes the step-size restriction for
long-horizon concentration runs.

Dirac formation at the origin is read from the stationary limit: the origin
value of the limit profile is recovered by extrapolating the three smallest
positive nodes, never by releasing the boundary during finite-time stepping.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.optimize import brentq

from . import energetics
from .density_solver import CFLError, NewtonError, SolverError, cfl_dt, edge_rates
from .model import (
    MassProfile,
    PotentialSpec,
    VolumetricGrid,
    diffusion_for,
    volumetric_drift,
)


class MonotonicityError(RuntimeError):
    """Step produced a genuinely decreasing profile; retry with smaller dt."""

    def __init__(self, dt: float, worst: float):
        super().__init__(
            f"mass step dt={dt:.3e} broke monotonicity (worst slope {worst:.3e})")
        self.suggested_dt = 0.5 * dt


@dataclass
class MassSolverConfig:
    """Knobs of the mass-equation solver.

    ``slope_floor`` guards every direct evaluation of ``Phi'(dM/dv)``
    (Jacobians, CFL bounds, the viscosity-inequality weights).
    ``hold_boundary`` pins ``M(t, 0)`` to its initial value (0, or a Dirac
    weight the run was started with); the origin edge carries no flux either
    way since the bounding sphere degenerates there.  ``dirac_threshold`` is
    the detection level for the loss of the zero boundary value.
    """

    dt: float = 1e-3
    slope_floor: float = 1e-10
    hold_boundary: bool = True
    dirac_threshold: float = 1e-4
    method: str = "explicit"
    cfl_safety: float = 0.8
    k_reg: float | None = None
    newton_tol: float = 1e-13
    newton_max_iter: int = 60
    max_step_retries: int = 14

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.slope_floor <= 0:
            raise ValueError("slope_floor must be positive")
        if self.dirac_threshold < 0:
            raise ValueError("dirac_threshold must be nonnegative")
        if self.method not in ("implicit", "explicit"):
            raise ValueError("method must be 'implicit' or 'explicit'")

    def diffusion(self, m: float):
        return diffusion_for(m, self.k_reg)


@dataclass
class MassTrajectory:
    times: list[float]
    profiles: list[MassProfile]
    diagnostics: list
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> VolumetricGrid:
        return self.profiles[0].grid

    def times_array(self) -> np.ndarray:
        return np.asarray(self.times)


@dataclass
class ConcentrationReport:
    """Dirac weight at the origin read off a quasi-stationary mass run."""

    status: str                      # "converged" or "inconclusive"
    alpha: float | None
    t_detect: float | None
    profile_ac: np.ndarray | None    # absolutely continuous density per cell
    mass_check: float | None         # alpha + int(profile_ac) - mass0
    energy_slope: float              # |dF/dt| estimate over the last window

    @property
    def conclusive(self) -> bool:
        return self.status == "converged"


@dataclass
class ViscosityReport:
    worst_super: float     # most negative supersolution residual seen
    worst_sub: float       # most positive subsolution residual seen
    n_samples: int
    n_skipped: int
    monotonicity_violations: int

    @property
    def worst_violation(self) -> float:
        return max(0.0, -self.worst_super, self.worst_sub,
                   float(self.monotonicity_violations))


@dataclass
class HolderProbeResult:
    status: str            # "ok" or "indeterminate"
    exponent: float | None
    fit_residual: float | None
    n_pairs: int


def _fix_monotone(M: np.ndarray, mass0: float, hold0: float | None,
                  dt: float, tol: float) -> np.ndarray:
    """Pin endpoints and repair roundoff-scale dips; reject real ones."""
    out = M.copy()
    if hold0 is not None:
        out[0] = hold0
    out[-1] = mass0
    drops = np.diff(out)
    worst = float(drops.min()) if drops.size else 0.0
    if worst < -tol:
        raise MonotonicityError(dt, worst)
    if worst < 0.0:
        out = np.maximum.accumulate(out)
        out = np.minimum(out, mass0)
        out[-1] = mass0
    return out


def step_mass(M: MassProfile, drift_edges: np.ndarray, dt: float,
              cfg: MassSolverConfig) -> MassProfile:
    """One monotone update of the mass profile with a frozen drift.

    Explicit mode enforces the CFL bound (raising :class:`CFLError` with a
    usable suggestion) and the implicit mode solves the backward-Euler system
    by damped Newton.  Monotonicity failures beyond roundoff raise
    :class:`MonotonicityError`; sub-roundoff dips are repaired by a running
    maximum.  ``M(R_v)`` is preserved exactly; ``M(0)`` is pinned to its
    current value when ``hold_boundary`` is set.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = M.grid
    drift_edges = np.asarray(drift_edges, dtype=float)
    if drift_edges.shape != (grid.n_cells + 1,):
        raise ValueError("drift must be given per edge")
    diff = cfg.diffusion(grid.params.m)
    slopes = np.maximum(M.slopes(), 0.0)
    mono_tol = 1e-12 * M.mass0
    hold0 = float(M.M[0]) if cfg.hold_boundary else None

    if cfg.method == "explicit":
        dcfg = _CflProxy(cfg)
        allowed = cfl_dt(slopes, drift_edges, diff, grid, dcfg)
        if dt > allowed * (1.0 + 1e-12):
            raise CFLError(dt, allowed)
        q = edge_rates(slopes, drift_edges, diff, grid)
        M_new = M.M + dt * q
        # a held origin with a Dirac weight keeps its value; the origin edge
        # has no flux under the scheme (q[0] = 0) so this is a pin, not a fix
        M_new = _fix_monotone(M_new, M.mass0, hold0 if cfg.hold_boundary else None,
                              dt, mono_tol)
        return M.copy(t=M.t + dt, M=M_new)

    return _step_mass_implicit(M, drift_edges, dt, cfg, diff, hold0, mono_tol)


class _CflProxy:
    """Adapter handing the density solver's CFL estimate our floors."""

    def __init__(self, cfg: MassSolverConfig):
        self.cfl_safety = cfg.cfl_safety
        self.rho_floor = cfg.slope_floor


def _step_mass_implicit(M: MassProfile, drift_edges: np.ndarray, dt: float,
                        cfg: MassSolverConfig, diff, hold0: float | None,
                        mono_tol: float) -> MassProfile:
    grid = M.grid
    n = grid.n_cells
    dv = grid.dv
    dv_face = 0.5 * (dv[:-1] + dv[1:])
    kap2 = grid.kappa_edges[1:-1] ** 2
    e = drift_edges[1:-1]
    e_pos, e_neg = np.maximum(e, 0.0), np.minimum(e, 0.0)
    M_old = M.M
    x = M_old.copy()

    def rates(Mv: np.ndarray) -> np.ndarray:
        return edge_rates(np.maximum(np.diff(Mv) / dv, 0.0), drift_edges, diff, grid)

    def residual(Mv: np.ndarray) -> np.ndarray:
        r = Mv - M_old - dt * rates(Mv)
        r[0] = Mv[0] - M_old[0]
        r[-1] = Mv[-1] - M.mass0
        return r

    res = residual(x)
    scale = M.mass0 + 2.0 * dt * float(np.sum(np.abs(rates(M_old))))
    tol = max(cfg.newton_tol * M.mass0, 64.0 * np.finfo(float).eps * scale)
    res_norm = float(np.max(np.abs(res)))
    for it in range(cfg.newton_max_iter):
        if res_norm <= tol:
            break
        p = np.maximum(np.diff(x) / dv, cfg.slope_floor)
        dphi = diff.dphi(p)
        dq_next = kap2 * (dphi[1:] / dv_face + e_pos) / dv[1:]      # dQ_j/dM_{j+1}
        dq_prev = kap2 * (dphi[:-1] / dv_face - e_neg) / dv[:-1]    # dQ_j/dM_{j-1}
        ab = np.zeros((3, n + 1))
        ab[1, 0] = ab[1, -1] = 1.0
        ab[1, 1:-1] = 1.0 + dt * (dq_next + dq_prev)
        ab[0, 2:] = -dt * dq_next
        ab[2, :-2] = -dt * dq_prev
        try:
            delta = solve_banded((1, 1), ab, -res)
        except Exception as exc:
            raise NewtonError(res_norm, it) from exc
        lam = 1.0
        for _ in range(30):
            x_try = x + lam * delta
            res_try = residual(x_try)
            norm_try = float(np.max(np.abs(res_try)))
            if norm_try < res_norm or norm_try <= tol:
                x, res, res_norm = x_try, res_try, norm_try
                break
            lam *= 0.5
        else:
            raise NewtonError(res_norm, it)
    else:
        raise NewtonError(res_norm, cfg.newton_max_iter)

    x = _fix_monotone(x, M.mass0, hold0, dt, max(mono_tol, 10.0 * tol))
    return M.copy(t=M.t + dt, M=x)


def solve_mass(M0: MassProfile, pot: PotentialSpec, params,
               cfg: MassSolverConfig, record_every: int = 1,
               stationary_tol: float | None = None) -> MassTrajectory:
    """March the mass equation on ``[0, T]``, recording profiles.

    The nonlocal drift is refreshed from the beginning-of-step profile (its
    slopes, plus any held origin value as a point mass at 0).  Step failures
    halve ``dt`` within a retry budget.  ``stationary_tol`` stops early once
    ``||M^{n+1} - M^n||_inf / dt`` drops below it.
    """
    grid = M0.grid
    profile = M0.copy()
    profile.t = 0.0

    def diagnostics(pr: MassProfile):
        return energetics.diagnostics_record(pr.density_state(), pot)

    times = [0.0]
    profiles = [profile.copy()]
    diags = [diagnostics(profile)]
    meta = {"steps": 0, "retries": 0, "stationary_reached": False}

    t_end = params.T
    steps_since_record = 0
    diff = cfg.diffusion(params.m)
    while profile.t < t_end * (1.0 - 1e-14):
        drift = volumetric_drift(profile, pot, grid, where="edges",
                                 point_mass=float(profile.M[0]))
        dt = min(cfg.dt, t_end - profile.t)
        if cfg.method == "explicit":
            dt = min(dt, cfl_dt(np.maximum(profile.slopes(), 0.0), drift, diff,
                                grid, _CflProxy(cfg)))
        prev = profile
        for attempt in range(cfg.max_step_retries + 1):
            try:
                profile = step_mass(profile, drift, dt, cfg)
                break
            except (CFLError, NewtonError, MonotonicityError) as exc:
                dt *= 0.5
                meta["retries"] += 1
                if attempt == cfg.max_step_retries:
                    raise SolverError(
                        f"mass step at t={profile.t:.6g} failed after "
                        f"{cfg.max_step_retries} dt halvings: {exc}") from exc
        meta["steps"] += 1
        steps_since_record += 1
        if steps_since_record >= record_every or profile.t >= t_end * (1.0 - 1e-14):
            times.append(profile.t)
            profiles.append(profile.copy())
            diags.append(diagnostics(profile))
            steps_since_record = 0
        if stationary_tol is not None:
            rate = float(np.max(np.abs(profile.M - prev.M))) / dt
            if rate < stationary_tol:
                meta["stationary_reached"] = True
                if times[-1] != profile.t:
                    times.append(profile.t)
                    profiles.append(profile.copy())
                    diags.append(diagnostics(profile))
                break
    return MassTrajectory(times=times, profiles=profiles, diagnostics=diags, meta=meta)


def as_mass_run(run) -> MassTrajectory:
    """View a density trajectory as a mass run (for the shared diagnostics)."""
    if isinstance(run, MassTrajectory):
        return run
    return MassTrajectory(times=list(run.times),
                          profiles=[s.mass_profile() for s in run.states],
                          diagnostics=list(run.diagnostics),
                          meta=dict(run.meta))


# ---------------------------------------------------------------------------
# Dirac-concentration detection
# ---------------------------------------------------------------------------

def _extrapolate_origin(M: np.ndarray, v: np.ndarray) -> float:
    """Limit of M as v -> 0+ from the three smallest positive nodes.

    Fits ``M(v) = alpha + c v^q`` through the nodes (Richardson with the
    order estimated from the data itself; near a Dirac the profile behaves
    like a sub-linear power).  Falls back to quadratic Lagrange
    extrapolation when no admissible order reproduces the node ratios.
    """
    M1, M2, M3 = M[1], M[2], M[3]
    d1, d2 = M2 - M1, M3 - M2
    lagrange = 3.0 * M1 - 3.0 * M2 + M3
    if d1 <= 0.0 or d2 <= 0.0:
        return lagrange
    ratio = d2 / d1

    def f(q):
        return (3.0 ** q - 2.0 ** q) / (2.0 ** q - 1.0) - ratio

    q_lo, q_hi = 0.05, 3.0
    if f(q_lo) * f(q_hi) > 0:
        return lagrange
    q = brentq(f, q_lo, q_hi, xtol=1e-12)
    c_vq = d1 / (2.0 ** q - 1.0)   # c * v1^q
    return M1 - c_vq


def detect_concentration(run, cfg: MassSolverConfig,
                         stationary_rtol: float = 1e-6) -> ConcentrationReport:
    """Read the Dirac weight at the origin off a quasi-stationary mass run.

    Requires the free-energy slope over the last recorded window to be below
    ``stationary_rtol`` (relative to ``max(|F|, 1)`` per unit time); when the
    run is still moving, the report is inconclusive and carries no number.
    The weight is the extrapolated ``v -> 0+`` limit of the final profile;
    the absolutely continuous part is its slope field, with the first cell
    reduced by the detected atom so the masses account exactly.
    """
    run = as_mass_run(run)
    times = run.times_array()
    if len(times) < 3:
        return ConcentrationReport(status="inconclusive", alpha=None, t_detect=None,
                                   profile_ac=None, mass_check=None,
                                   energy_slope=float("inf"))
    F = np.array([d.energy.F for d in run.diagnostics])
    window = max(1e-300, times[-1] - times[-2])
    slope = abs(F[-1] - F[-2]) / (window * max(abs(F[-1]), 1.0))
    if not np.isfinite(slope) or slope > stationary_rtol:
        return ConcentrationReport(status="inconclusive", alpha=None, t_detect=None,
                                   profile_ac=None, mass_check=None,
                                   energy_slope=float(slope))

    grid = run.grid
    final = run.profiles[-1]
    mass0 = final.mass0
    alpha = _extrapolate_origin(final.M, grid.v_edges)
    alpha = float(np.clip(alpha, 0.0, min(final.M[1], mass0)))
    if alpha <= cfg.dirac_threshold:
        alpha = max(alpha, 0.0)

    profile_ac = final.slopes().copy()
    profile_ac[0] = (final.M[1] - alpha) / grid.dv[0]
    mass_check = alpha + float(profile_ac @ grid.dv) - mass0

    t_detect = None
    above = np.array([pr.M[1] > cfg.dirac_threshold for pr in run.profiles])
    if above.any():
        idx = len(above) - 1
        while idx > 0 and above[idx - 1]:
            idx -= 1
        if above[idx:].all() and above[-1]:
            t_detect = float(times[idx])
    return ConcentrationReport(status="converged", alpha=alpha, t_detect=t_detect,
                               profile_ac=profile_ac, mass_check=mass_check,
                               energy_slope=float(slope))


# ---------------------------------------------------------------------------
# Viscosity-inequality probe
# ---------------------------------------------------------------------------

def check_viscosity_inequalities(run, pot: PotentialSpec | None = None,
                                 sample_budget: int = 400, seed: int = 0,
                                 slope_floor: float = 1e-8,
                                 drift_fields: list[np.ndarray] | None = None
                                 ) -> ViscosityReport:
    """Sample the discrete field against the viscosity-solution inequalities.

    At random interior space-time points, the quadratic through the three
    neighbouring edge values (shifted infinitesimally) is an admissible test
    function touching the discrete solution from below or above; evaluating

        res = phi_t / Phi'(phi_v) - kappa^2 phi_vv - kappa^2 phi_v/Phi'(phi_v) E

    with the nonlocal drift frozen from the discrete solution gives the
    supersolution residual (must be >= -tol) and subsolution residual
    (<= tol) simultaneously.  Samples with ``|phi_v|`` under ``slope_floor``
    are skipped (admissible tests need a nonvanishing slope away from the
    touching point); slopes below ``-slope_floor`` are monotonicity
    violations and are counted separately.
    """
    run = as_mass_run(run)
    times = run.times_array()
    grid = run.grid
    n = grid.n_cells
    if len(times) < 3 or n < 5:
        raise ValueError("need at least 3 recorded times and 5 cells")
    m = grid.params.m
    diff = diffusion_for(m, None)
    rng = np.random.default_rng(seed)

    drift_cache: dict[int, np.ndarray] = {}

    def drift_at(k: int) -> np.ndarray:
        if drift_fields is not None:
            return drift_fields[k]
        if k not in drift_cache:
            if pot is None:
                raise ValueError("provide either pot or drift_fields")
            drift_cache[k] = volumetric_drift(run.profiles[k], pot, grid,
                                              where="edges",
                                              point_mass=float(run.profiles[k].M[0]))
        return drift_cache[k]

    worst_super = np.inf
    worst_sub = -np.inf
    skipped = 0
    mono_bad = 0
    ks = rng.integers(1, len(times) - 1, size=sample_budget)
    js = rng.integers(2, n - 1, size=sample_budget)
    dv = grid.dv[0]
    for k, j in zip(ks, js):
        Mk = run.profiles[k].M
        b = (Mk[j + 1] - Mk[j - 1]) / (2.0 * dv)
        if b < -slope_floor:
            mono_bad += 1
            continue
        if abs(b) < slope_floor:
            skipped += 1
            continue
        c = (Mk[j + 1] - 2.0 * Mk[j] + Mk[j - 1]) / dv ** 2
        a = ((run.profiles[k + 1].M[j] - run.profiles[k - 1].M[j])
             / (times[k + 1] - times[k - 1]))
        kap2 = grid.kappa_edges[j] ** 2
        w = diff.dphi(max(b, slope_floor))
        res = a / w - kap2 * c - kap2 * (b / w) * float(drift_at(k)[j])
        worst_super = min(worst_super, res)
        worst_sub = max(worst_sub, res)
    n_eval = sample_budget - skipped - mono_bad
    if n_eval <= 0:
        worst_super, worst_sub = 0.0, 0.0
    return ViscosityReport(worst_super=float(worst_super), worst_sub=float(worst_sub),
                           n_samples=int(n_eval), n_skipped=int(skipped),
                           monotonicity_violations=int(mono_bad))


# ---------------------------------------------------------------------------
# Hoelder regularity probe
# ---------------------------------------------------------------------------

def holder_regularity_probe(run, eps: float, T1: float, n_pairs: int = 600,
                            seed: int = 0) -> HolderProbeResult:
    """Empirical interior Hoelder exponent of the mass field.

    Least-squares fit of ``log |dM|`` against
    ``log(|dv| + C |dt|^{1/(m+1)})`` with ``C = mass0^{(m-1)/(m+1)}`` over
    sampled point pairs in ``[T1, inf) x [eps, R_v]``.  Returns an
    indeterminate status when too few informative pairs exist (constant
    regions difference to zero) or the abscissa has no spread.
    """
    run = as_mass_run(run)
    times = run.times_array()
    grid = run.grid
    m = grid.params.m
    mass0 = run.profiles[0].mass0
    t_idx = np.where(times >= T1)[0]
    v_idx = np.where(grid.v_edges >= eps)[0]
    if len(t_idx) < 2 or len(v_idx) < 3:
        return HolderProbeResult(status="indeterminate", exponent=None,
                                 fit_residual=None, n_pairs=0)
    rng = np.random.default_rng(seed)
    C = mass0 ** ((m - 1.0) / (m + 1.0))
    xs, ys = [], []
    for i in range(n_pairs):
        # alternate axis-aligned pairs: purely spatial and purely temporal
        # increments probe the two scalings of the estimate separately
        if i % 2 == 0:
            k1 = k2 = rng.choice(t_idx)
            j1, j2 = rng.choice(v_idx, size=2)
        else:
            k1, k2 = rng.choice(t_idx, size=2)
            j1 = j2 = rng.choice(v_idx)
        dmass = run.profiles[k1].M[j1] - run.profiles[k2].M[j2]
        dv = abs(grid.v_edges[j1] - grid.v_edges[j2])
        dt = abs(times[k1] - times[k2])
        scale = dv + C * dt ** (1.0 / (m + 1.0))
        if scale <= 0.0 or abs(dmass) < 1e-14 * mass0:
            continue
        xs.append(np.log(scale))
        ys.append(np.log(abs(dmass)))
    if len(xs) < 10 or (max(xs) - min(xs)) < 0.5:
        return HolderProbeResult(status="indeterminate", exponent=None,
                                 fit_residual=None, n_pairs=len(xs))
    coef, residuals, *_ = np.polyfit(xs, ys, 1, full=True)
    rms = float(np.sqrt(residuals[0] / len(xs))) if len(residuals) else 0.0
    return HolderProbeResult(status="ok", exponent=float(coef[0]),
                             fit_residual=rms, n_pairs=len(xs))
