"""Run orchestration: executes configured experiments and emits artifacts.

Each run owns a directory and produces CSV time series (full round-trip
float formatting, bit-identical across repeated runs of the same config), a
metadata record, and a manifest listing every emitted file together with the
verdict and numeric margin of each enabled diagnostic.  Hard diagnostics
(conservation, positivity, monotonicity, energy decay, moment bounds,
stationary residuals) gate the process exit code; informational ones
(dissipation identity, equicontinuity, viscosity probe, concentration) are
recorded with their numbers.
"""
from __future__ import annotations

import concurrent.futures
import hashlib
import itertools
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import energetics
from .config import ConfigError, ExperimentConfig, build_initial, check_hypotheses, parse_config
from .density_solver import SolverConfig, Trajectory, solve_density
from .mass_solver import (
    MassSolverConfig,
    MassTrajectory,
    as_mass_run,
    check_viscosity_inequalities,
    detect_concentration,
    solve_mass,
)
from .model import VolumetricGrid
from .stationary_solver import solve_stationary

_HARD = "hard"
_INFO = "info"


@dataclass
class Diagnostic:
    name: str
    status: str          # pass | fail | inconclusive
    margin: float | None
    detail: str = ""
    kind: str = _HARD

    @property
    def blocking(self) -> bool:
        return self.kind == _HARD and self.status == "fail"


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    started: str
    finished: str
    files: list[str] = field(default_factory=list)
    diagnostics: list[Diagnostic] = field(default_factory=list)
    hypotheses: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not any(d.blocking for d in self.diagnostics)

    def to_json(self) -> str:
        payload = {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
            "files": self.files,
            "ok": self.ok,
            "diagnostics": [asdict(d) for d in self.diagnostics],
            "hypotheses": self.hypotheses,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.canonical_text().encode()).hexdigest()[:12]


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_density_csv(path: str, traj: Trajectory) -> None:
    grid = traj.grid
    n = grid.n_cells
    header = (["t"] + [f"v_{i:04d}" for i in range(n)]
              + [f"rho_{i:04d}" for i in range(n)])
    rows = ([t, *grid.v_centers, *state.rho]
            for t, state in zip(traj.times, traj.states))
    _write_csv(path, header, rows)


def write_mass_csv(path: str, run: MassTrajectory) -> None:
    grid = run.grid
    n = grid.n_cells + 1
    header = (["t"] + [f"v_{i:04d}" for i in range(n)]
              + [f"M_{i:04d}" for i in range(n)])
    rows = ([t, *grid.v_edges, *pr.M] for t, pr in zip(run.times, run.profiles))
    _write_csv(path, header, rows)


def write_energy_csv(path: str, run) -> None:
    header = ["t", "E_diff", "E_conf", "E_int", "F", "D", "m2", "mp"]
    rows = ([d.energy.t, d.energy.E_diff, d.energy.E_conf, d.energy.E_int,
             d.energy.F, d.energy.D, d.moments.m2, d.moments.mp]
            for d in run.diagnostics)
    _write_csv(path, header, rows)


def write_flat_record(path: str, record: dict) -> None:
    with open(path, "w") as fh:
        json.dump({k: (v.tolist() if isinstance(v, np.ndarray) else v)
                   for k, v in record.items()}, fh, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Diagnostics over runs
# ---------------------------------------------------------------------------

def _mass_conservation_diag(traj: Trajectory, cfg: SolverConfig) -> Diagnostic:
    dv = traj.grid.dv
    mass0 = traj.states[0].params.mass0
    drift = max(abs(float(s.rho @ dv) - mass0) for s in traj.states) / mass0
    tol = 1e-12 if cfg.method == "explicit" else 10.0 * cfg.newton_tol
    return Diagnostic("mass_conservation", "pass" if drift <= tol else "fail",
                      margin=tol - drift, detail=f"max relative drift {drift:.3e}")


def _positivity_diag(traj: Trajectory) -> Diagnostic:
    worst = min(float(s.rho.min()) for s in traj.states)
    return Diagnostic("positivity", "pass" if worst >= 0.0 else "fail",
                      margin=worst, detail=f"min density {worst:.3e}")


def _energy_monotone_diag(run) -> Diagnostic:
    F = np.array([d.energy.F for d in run.diagnostics])
    if len(F) < 2:
        return Diagnostic("energy_monotonicity", "pass", margin=0.0,
                          detail="fewer than two records")
    increases = np.diff(F) - 1e-8 * np.abs(F[:-1])
    worst = float(np.max(increases))
    return Diagnostic("energy_monotonicity", "pass" if worst <= 0.0 else "fail",
                      margin=-worst,
                      detail=f"worst step increase beyond tolerance {worst:.3e}")


def _moment_diag(run) -> Diagnostic:
    report = energetics.moment_bound_check(run)
    status = "pass" if report.ok else "fail"
    return Diagnostic("moment_bounds", status, margin=report.m2_margin,
                      detail=(f"m2 margin {report.m2_margin:.3e}; "
                              f"mp envelope A={report.mp_A:.4g}, B={report.mp_B:.4g}"))


def _dissipation_identity_diag(run) -> Diagnostic:
    times = np.asarray(run.times)
    F = np.array([d.energy.F for d in run.diagnostics])
    D = np.array([d.energy.D for d in run.diagnostics])
    if len(times) < 3:
        return Diagnostic("dissipation_identity", "inconclusive", None,
                          "needs at least 3 records", kind=_INFO)
    drop = F[0] - F[-1]
    integral = float(np.trapezoid(D, times))
    if drop <= 1e-12 * max(1.0, abs(F[0])):
        return Diagnostic("dissipation_identity", "pass", margin=0.0,
                          detail="no energy drop over the run", kind=_INFO)
    rel = abs(drop - integral) / abs(drop)
    return Diagnostic("dissipation_identity", "pass" if rel <= 0.05 else "inconclusive",
                      margin=0.05 - rel,
                      detail=f"|dF - int D|/|dF| = {rel:.4f}", kind=_INFO)


def _mass_monotonicity_diag(run: MassTrajectory) -> Diagnostic:
    worst = min(float(np.diff(pr.M).min()) for pr in run.profiles)
    return Diagnostic("mass_monotonicity", "pass" if worst >= -1e-15 else "fail",
                      margin=worst, detail=f"min slope increment {worst:.3e}")


def _endpoint_diag(run: MassTrajectory) -> Diagnostic:
    mass0 = run.profiles[0].mass0
    worst = max(abs(float(pr.M[-1]) - mass0) for pr in run.profiles)
    return Diagnostic("endpoint_preservation", "pass" if worst == 0.0 else "fail",
                      margin=-worst, detail=f"max |M(R_v) - mass0| = {worst:.3e}")


def _w11_diag(run) -> Diagnostic:
    times = run.times if isinstance(run.times, list) else list(run.times)
    if len(times) < 3:
        return Diagnostic("w11_equicontinuity", "inconclusive", None,
                          "needs at least 3 records", kind=_INFO)
    i = len(times) // 2
    rec = energetics.w11_equicontinuity(run, times[-1], times[i])
    status = "pass" if rec.ok else "inconclusive"
    return Diagnostic("w11_equicontinuity", status,
                      margin=rec.bound - rec.surrogate,
                      detail=f"surrogate {rec.surrogate:.3e} vs bound {rec.bound:.3e}",
                      kind=_INFO)


# ---------------------------------------------------------------------------
# run()
# ---------------------------------------------------------------------------

def run(config: ExperimentConfig, out_dir: str | None = None) -> RunManifest:
    """Execute the configured mode and emit CSVs, reports, and a manifest.

    Returns the manifest; ``manifest.ok`` is False when any hard diagnostic
    failed.  ``out_dir`` overrides the config's output directory.
    """
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    out = out_dir or config.output_dir
    os.makedirs(out, exist_ok=True)
    run_id = config_hash(config)
    files: list[str] = []
    diagnostics: list[Diagnostic] = []
    hyp = {name: asdict(v) for name, v in check_hypotheses(config).items()}

    def emit(name: str, writer, *args) -> None:
        path = os.path.join(out, name)
        writer(path, *args)
        files.append(name)

    emit("metadata.json", write_flat_record, {
        "run_id": run_id,
        "mode": config.mode,
        "m": config.params.m, "d": config.params.d, "R": config.params.R,
        "mass0": config.params.mass0, "T": config.params.T,
        "cells": config.n_cells,
        "V": config.potential.V.expression(),
        "W": config.potential.W.expression(),
        "initial": config.initial.expression(),
        "config": config.canonical_text(),
    })

    if config.mode == "sweep":
        return _run_sweep(config, out, run_id, started, files, diagnostics, hyp)
    if config.mode == "convergence":
        table = convergence_study(config, config.levels)
        emit("convergence.csv", _write_convergence_csv, table)
        for row in table["orders"]:
            ok = all(o >= 0.9 or not np.isfinite(o) for o in row[1:])
            diagnostics.append(Diagnostic(
                f"order_{row[0]}", "pass" if ok else "fail",
                margin=min((o for o in row[1:] if np.isfinite(o)), default=np.inf),
                detail=f"observed orders {row[1:]}"))
        return _finish(out, run_id, config, started, files, diagnostics, hyp)

    grid = VolumetricGrid.uniform(config.params, config.n_cells)

    if config.mode == "stationary":
        state = solve_stationary(config.potential, config.params)
        emit("stationary.json", write_flat_record, {
            "h": state.h, "alpha": state.alpha,
            "boundary_slope": state.boundary_slope,
            "residual": state.residual, "ac_mass": state.ac_mass,
        })
        emit("stationary_profile.csv", _write_csv,
             ["v_center", "rho_hat"],
             zip(state.grid.v_centers, state.rho_hat))
        diagnostics.append(Diagnostic(
            "stationary_residual", "pass" if state.residual < 1e-8 else "fail",
            margin=1e-8 - state.residual,
            detail=f"self-consistency residual {state.residual:.3e}"))
        diagnostics.append(Diagnostic(
            "mass_accounting", "pass"
            if abs(state.alpha + state.ac_mass - config.params.mass0)
            <= 1e-8 * config.params.mass0 else "fail",
            margin=None, detail=f"alpha={state.alpha:.6g}"))
        return _finish(out, run_id, config, started, files, diagnostics, hyp)

    density_traj = None
    mass_run = None
    if config.mode in ("density", "both"):
        rho0 = build_initial(config, grid)
        density_traj = solve_density(rho0, config.potential, config.params,
                                     config.solver, record_every=config.record_every)
        emit("density.csv", write_density_csv, density_traj)
        emit("energy.csv", write_energy_csv, density_traj)
        diagnostics.append(_mass_conservation_diag(density_traj, config.solver))
        diagnostics.append(_positivity_diag(density_traj))
        diagnostics.append(_energy_monotone_diag(density_traj))
        diagnostics.append(_moment_diag(density_traj))
        diagnostics.append(_dissipation_identity_diag(density_traj))
        diagnostics.append(_w11_diag(density_traj))

    if config.mode in ("mass", "both"):
        rho0 = build_initial(config, grid)
        mass_run = solve_mass(rho0.mass_profile(), config.potential, config.params,
                              config.mass_solver, record_every=config.record_every)
        emit("mass.csv", write_mass_csv, mass_run)
        if config.mode == "mass":
            emit("energy_mass.csv", write_energy_csv, mass_run)
        diagnostics.append(_mass_monotonicity_diag(mass_run))
        diagnostics.append(_endpoint_diag(mass_run))
        report = detect_concentration(mass_run, config.mass_solver)
        emit("concentration.json", write_flat_record, {
            "status": report.status, "alpha": report.alpha,
            "t_detect": report.t_detect, "mass_check": report.mass_check,
            "energy_slope": report.energy_slope,
        })
        diagnostics.append(Diagnostic(
            "concentration", "pass" if report.conclusive else "inconclusive",
            margin=None,
            detail=(f"alpha={report.alpha}" if report.conclusive
                    else f"energy slope {report.energy_slope:.3e}"),
            kind=_INFO))
        if len(mass_run.times) >= 3:
            vis = check_viscosity_inequalities(mass_run, pot=config.potential,
                                               sample_budget=300, seed=config.seed)
            diagnostics.append(Diagnostic(
                "viscosity_probe", "pass" if vis.monotonicity_violations == 0
                else "fail", margin=-vis.worst_violation,
                detail=(f"worst residuals [{vis.worst_super:.3e}, "
                        f"{vis.worst_sub:.3e}], {vis.n_samples} samples"),
                kind=_INFO))

    if config.mode == "both" and density_traj is not None and mass_run is not None:
        gap = _cross_solver_gap(density_traj, mass_run)
        diagnostics.append(Diagnostic("cross_solver_gap", "pass", margin=None,
                                      detail=f"sup gap {gap:.3e}", kind=_INFO))

    return _finish(out, run_id, config, started, files, diagnostics, hyp)


def _cross_solver_gap(density_traj: Trajectory, mass_run: MassTrajectory) -> float:
    times_d = np.asarray(density_traj.times)
    gap = 0.0
    for t, pr in zip(mass_run.times, mass_run.profiles):
        i = int(np.argmin(np.abs(times_d - t)))
        if abs(times_d[i] - t) > 1e-9 * max(1.0, t):
            continue
        M_d = density_traj.states[i].mass_profile().M
        gap = max(gap, float(np.max(np.abs(M_d - pr.M))))
    return gap


def _finish(out, run_id, config, started, files, diagnostics, hyp) -> RunManifest:
    manifest = RunManifest(run_id=run_id, config_hash=config_hash(config),
                           started=started,
                           finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
                           files=files, diagnostics=diagnostics, hypotheses=hyp)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


# ---------------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------------

def convergence_study(config: ExperimentConfig, levels: int = 3) -> dict:
    """Solve the configured problem on a ladder of grids and report orders.

    Levels double the cell count and halve the time steps together.  The
    table carries, per level: the mass-conservation drift, the
    energy-identity residual, the sup-norm gap between the density and mass
    solvers, and the L1 distance of the final density to the stationary
    state; the observed orders are ``log2`` ratios of successive errors
    (infinite when both sit at rounding level).
    """
    if levels < 2:
        raise ValueError("need at least 2 levels")
    errors = {"mass_drift": [], "energy_identity": [], "solver_gap": [],
              "stationary_l1": []}
    ns = []
    stationary = solve_stationary(config.potential, config.params)
    for lvl in range(levels):
        n = config.n_cells * 2 ** lvl
        ns.append(n)
        scale = 2.0 ** (-lvl)
        solver = replace(config.solver, dt=config.solver.dt * scale)
        mass_cfg = replace(config.mass_solver, dt=config.mass_solver.dt * scale)
        sub = replace(config, n_cells=n, solver=solver, mass_solver=mass_cfg)
        grid = VolumetricGrid.uniform(sub.params, n)
        rho0 = build_initial(sub, grid)
        traj = solve_density(rho0, sub.potential, sub.params, sub.solver,
                             record_every=max(1, int(round(1.0 / solver.dt / 50))))
        mrun = solve_mass(rho0.mass_profile(), sub.potential, sub.params, mass_cfg,
                          record_every=max(1, int(round(1.0 / mass_cfg.dt / 50))))

        dv = grid.dv
        mass0 = sub.params.mass0
        errors["mass_drift"].append(
            max(abs(float(s.rho @ dv) - mass0) for s in traj.states) / mass0)

        times = np.asarray(traj.times)
        F = np.array([dg.energy.F for dg in traj.diagnostics])
        D = np.array([dg.energy.D for dg in traj.diagnostics])
        drop = F[0] - F[-1]
        res = (abs(drop - float(np.trapezoid(D, times))) / abs(drop)
               if abs(drop) > 1e-13 else 0.0)
        errors["energy_identity"].append(res)

        errors["solver_gap"].append(_cross_solver_gap(traj, mrun))

        target = _project_profile(stationary, grid)
        errors["stationary_l1"].append(
            float(np.abs(traj.states[-1].rho - target) @ dv))

    orders = []
    for name, errs in errors.items():
        row = [name]
        for a, b in zip(errs[:-1], errs[1:]):
            if a < 1e-13 and b < 1e-13:
                row.append(float("inf"))
            elif b <= 0.0:
                row.append(float("inf"))
            else:
                row.append(float(np.log2(a / b)))
        orders.append(row)
    return {"n_cells": ns, "errors": errors, "orders": orders}


def _project_profile(stationary, grid: VolumetricGrid) -> np.ndarray:
    """Cell averages of the stationary profile on a (coarser) run grid."""
    fine = stationary.grid
    mass_fine = np.concatenate(([0.0], np.cumsum(stationary.rho_hat * fine.dv)))
    M_on_edges = np.interp(grid.v_edges, fine.v_edges, mass_fine)
    return np.diff(M_on_edges) / grid.dv


def _write_convergence_csv(path: str, table: dict) -> None:
    with open(path, "w") as fh:
        fh.write("quantity," + ",".join(f"n={n}" for n in table["n_cells"])
                 + "," + ",".join(
                     f"order_{i}" for i in range(len(table["n_cells"]) - 1)) + "\n")
        for name, errs in table["errors"].items():
            row = next(r for r in table["orders"] if r[0] == name)
            fh.write(name + "," + ",".join(_fmt(e) for e in errs)
                     + "," + ",".join(_fmt(o) for o in row[1:]) + "\n")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _sweep_item(payload: tuple[str, str]) -> tuple[str, bool]:
    text, out_dir = payload
    cfg = parse_config(text)
    manifest = run(cfg, out_dir=out_dir)
    return out_dir, manifest.ok


def expand_sweep(config: ExperimentConfig) -> list[str]:
    """Cross product of the sweep lists as full config texts."""
    if not config.sweep:
        raise ConfigError([])
    keys = sorted(config.sweep)
    combos = itertools.product(*(config.sweep[k] for k in keys))
    base_lines = []
    for raw in config.source_text.splitlines():
        stripped = raw.split("#", 1)[0].strip()
        if stripped.startswith("sweep.") or stripped.startswith("mode"):
            continue
        base_lines.append(raw)
    texts = []
    for combo in combos:
        overrides = dict(zip(keys, combo))
        lines = []
        for raw in base_lines:
            key = raw.split("=", 1)[0].strip() if "=" in raw else None
            if key in overrides:
                continue
            lines.append(raw)
        lines.append("mode = both")
        for k, v in overrides.items():
            lines.append(f"{k} = {v}")
        texts.append("\n".join(lines) + "\n")
    return texts


def _run_sweep(config, out, run_id, started, files, diagnostics, hyp) -> RunManifest:
    texts = expand_sweep(config)
    jobs = []
    for i, text in enumerate(texts):
        sub_id = hashlib.sha256(text.encode()).hexdigest()[:8]
        jobs.append((text, os.path.join(out, f"run_{i:03d}_{sub_id}")))
    workers = min(len(jobs), os.cpu_count() or 1)
    results = []
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        for out_dir, ok in pool.map(_sweep_item, jobs):
            results.append((out_dir, ok))
    for out_dir, ok in sorted(results):
        files.append(os.path.relpath(out_dir, out))
        diagnostics.append(Diagnostic(f"sweep:{os.path.basename(out_dir)}",
                                      "pass" if ok else "fail", margin=None))
    return _finish(out, run_id, config, started, files, diagnostics, hyp)
