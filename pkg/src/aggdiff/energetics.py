"""Free energy, dissipation, moments, and equicontinuity diagnostics.

These are read-only analytics over density states and trajectories.  The
functional

    F[rho] = -1/(1-m) int rho^m + int V rho + 1/2 int int W(x-y) rho rho

decreases along resolved solves, and the decrements match the time integral
of the dissipation ``D = int rho |grad(m/(m-1) rho^{m-1} + V + W*rho)|^2``.
The discrete formulas below integrate the piecewise-constant finite-volume
representation exactly in the entropy term and by per-cell Gauss-Legendre in
the potential/moment terms; the dissipation forms the entropy variable with a
vacuum floor, the one place ``rho^{m-1}`` is evaluated directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    DensityState,
    PotentialSpec,
    PowerDiffusion,
    interaction_energy,
    upsilon_values,
)


@dataclass
class EnergyRecord:
    t: float
    E_diff: float
    E_conf: float
    E_int: float
    F: float
    D: float


@dataclass
class MomentRecord:
    t: float
    m2: float
    mp: float


@dataclass
class StateDiagnostics:
    energy: EnergyRecord
    moments: MomentRecord


@dataclass
class MomentBoundReport:
    """Outcome of the moment growth checks along a trajectory."""

    m2_ok: bool
    m2_margin: float
    m2_first_violation: float | None
    mp_A: float
    mp_B: float
    mp_ok: bool

    @property
    def ok(self) -> bool:
        return self.m2_ok and self.mp_ok


@dataclass
class W11Record:
    t: float
    s: float
    surrogate: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.surrogate <= self.bound * (1.0 + 1e-9) + 1e-15


def energy_lower_bound(params) -> float:
    """Analytic floor ``-mass0 |B_R|^{1-m}/(1-m)`` (V, W >= 0 drop the rest)."""
    m = params.m
    return -params.mass0 * params.R_v ** (1.0 - m) / (1.0 - m)


def free_energy(state: DensityState, pot: PotentialSpec,
                rho_floor: float = 1e-12) -> EnergyRecord:
    """Free-energy record of one state, including the dissipation estimate.

    The entropy term is exact for the cellwise-constant density; confinement
    uses per-cell quadrature of V; the interaction term reuses the radial
    convolution (exact moment form for quadratic W).
    """
    grid = state.grid
    m = state.params.m
    rho = state.rho
    e_diff = -float(rho ** m @ grid.dv) / (1.0 - m)
    v_cell = grid.cell_average(lambda v: pot.V.value(grid.params.r_of_v(v)))
    e_conf = float(rho @ (v_cell * grid.dv))
    e_int = interaction_energy(rho, pot.W, grid)
    f = e_diff + e_conf + e_int
    d = dissipation(state, pot, rho_floor=rho_floor)
    return EnergyRecord(t=state.t, E_diff=e_diff, E_conf=e_conf, E_int=e_int,
                        F=f, D=d)


def dissipation(state: DensityState, pot: PotentialSpec,
                rho_floor: float = 1e-12) -> float:
    """``int rho |grad xi|^2`` with ``xi = m/(m-1) rho^{m-1} + V + W*rho``.

    Evaluated at interior edges with arithmetic-mean density weights, so the
    result is nonnegative by construction.  The entropy variable is formed
    from ``max(rho, rho_floor)``; the floor's bias is confined to vacuum
    regions where the density weight vanishes anyway.
    """
    grid = state.grid
    diff = PowerDiffusion(state.params.m)
    xi = diff.entropy_variable(np.maximum(state.rho, rho_floor))
    xi = xi + upsilon_values(state.rho, pot, grid, where="centers")
    dv_face = 0.5 * (grid.dv[:-1] + grid.dv[1:])
    slope = (xi[1:] - xi[:-1]) / dv_face
    kap2 = grid.kappa_edges[1:-1] ** 2
    rho_face = 0.5 * (state.rho[1:] + state.rho[:-1])
    return float(np.sum(rho_face * kap2 * slope ** 2 * dv_face))


def moments(state: DensityState) -> MomentRecord:
    """Second moment and the ``p = 2/(1-m)`` moment of the state."""
    grid = state.grid
    p = 2.0 / (1.0 - state.params.m)
    r2 = grid.cell_average(lambda v: grid.params.r_of_v(v) ** 2)
    rp = grid.cell_average(lambda v: grid.params.r_of_v(v) ** p)
    m2 = float(state.rho @ (r2 * grid.dv))
    mp = float(state.rho @ (rp * grid.dv))
    return MomentRecord(t=state.t, m2=m2, mp=mp)


def diagnostics_record(state: DensityState, pot: PotentialSpec,
                       rho_floor: float = 1e-12) -> StateDiagnostics:
    return StateDiagnostics(energy=free_energy(state, pot, rho_floor=rho_floor),
                            moments=moments(state))


def moment_bound_check(traj) -> MomentBoundReport:
    """Check the moment growth bounds along a recorded trajectory.

    The second moment must satisfy the Gronwall bound
    ``m2(t) <= (m2(0) + F(0) - F_lower) e^t`` with the analytic energy floor.
    The higher moment is matched against an exponential envelope
    ``A e^{B t}``: ``B`` is the least-squares growth rate (clamped at 0) and
    ``A`` the smallest constant making the inequality hold, which is then
    asserted together with the recorded constants.
    """
    times = np.asarray(traj.times)
    energies = [d.energy for d in traj.diagnostics]
    momrecs = [d.moments for d in traj.diagnostics]
    params = traj.states[0].params

    f_lower = energy_lower_bound(params)
    gap0 = energies[0].F - f_lower
    m2 = np.array([mr.m2 for mr in momrecs])
    bound = (m2[0] + gap0) * np.exp(times)
    ok = m2 <= bound * (1.0 + 1e-9)
    m2_ok = bool(np.all(ok))
    margin = float(np.min((bound - m2) / np.maximum(bound, 1e-300)))
    first_violation = None if m2_ok else float(times[np.argmax(~ok)])

    mp = np.array([mr.mp for mr in momrecs])
    safe = np.maximum(mp, 1e-300)
    if len(times) >= 2 and times[-1] > times[0]:
        slope = np.polyfit(times, np.log(safe), 1)[0]
    else:
        slope = 0.0
    B = max(float(slope), 0.0)
    A = float(np.max(safe * np.exp(-B * times)))
    mp_ok = bool(np.all(mp <= A * np.exp(B * times) * (1.0 + 1e-12)))
    return MomentBoundReport(m2_ok=m2_ok, m2_margin=margin,
                             m2_first_violation=first_violation,
                             mp_A=A, mp_B=B, mp_ok=mp_ok)


def _locate_time(traj, t: float) -> int:
    times = np.asarray(traj.times)
    i = int(np.argmin(np.abs(times - t)))
    if not np.isclose(times[i], t, rtol=1e-9, atol=1e-12):
        raise ValueError(f"t={t} is not a recorded time of the trajectory")
    return i


def w11_equicontinuity(traj, t: float, s: float) -> W11Record:
    """Both sides of the energy equicontinuity estimate between two times.

    The surrogate distance is ``int_0^{R_v} |M_t - M_s| dv`` (the mass
    profiles are piecewise linear, so the trapezoid rule on edges is exact up
    to the kinks of ``|.|``); the bound is
    ``mass0^{1/2} (F(t^) - F(t_))^{1/2} |t - s|^{1/2}`` over the window
    spanned by the two times.  The record's ``ok`` flags the inequality.
    """
    i, j = _locate_time(traj, t), _locate_time(traj, s)
    lo, hi = min(i, j), max(i, j)
    state_t, state_s = traj.states[i], traj.states[j]
    grid = traj.grid
    m_t = state_t.mass_profile().M
    m_s = state_s.mass_profile().M
    gap_abs = np.abs(m_t - m_s)
    surrogate = float(np.trapezoid(gap_abs, grid.v_edges))
    f_gap = max(traj.diagnostics[lo].energy.F - traj.diagnostics[hi].energy.F, 0.0)
    mass0 = traj.states[0].params.mass0
    bound = np.sqrt(mass0) * np.sqrt(f_gap) * np.sqrt(abs(t - s))
    return W11Record(t=t, s=s, surrogate=surrogate, bound=float(bound))


def grad_phi_l1_bound(traj, pot: PotentialSpec, i_start: int, i_end: int,
                      rho_floor: float = 1e-12) -> tuple[float, float]:
    """Both sides of the L1 bound on ``grad rho^m`` over a recording window.

    Left side: ``int int |d_v rho^m| kappa dv dt``; right side:
    ``mass0^{1/2} (F-gap + int int rho |kappa E|^2)^{1/2}``.  Implied by the
    dissipation identity for windows of length <= 1/2.
    """
    grid = traj.grid
    m = traj.states[0].params.m
    times = np.asarray(traj.times[i_start:i_end + 1])
    lhs_t = []
    drift_sq_t = []
    for state in traj.states[i_start:i_end + 1]:
        phi = state.rho ** m
        kap = grid.kappa_edges[1:-1]
        lhs_t.append(float(np.sum(kap * np.abs(phi[1:] - phi[:-1]))))
        from .model import volumetric_drift

        e = volumetric_drift(state, pot, grid, where="edges")[1:-1]
        rho_face = 0.5 * (state.rho[1:] + state.rho[:-1])
        dv_face = 0.5 * (grid.dv[:-1] + grid.dv[1:])
        drift_sq_t.append(float(np.sum(rho_face * (kap * e) ** 2 * dv_face)))
    lhs = float(np.trapezoid(lhs_t, times))
    f_gap = max(traj.diagnostics[i_start].energy.F
                - traj.diagnostics[i_end].energy.F, 0.0)
    drift_sq = float(np.trapezoid(drift_sq_t, times))
    mass0 = traj.states[0].params.mass0
    rhs = np.sqrt(mass0) * np.sqrt(f_gap + drift_sq)
    return lhs, float(rhs)
