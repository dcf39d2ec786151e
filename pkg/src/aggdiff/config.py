"""Experiment configuration: a flat key=value grammar with tagged expressions.

The format is line oriented: ``key = value``, ``#`` starts a comment, keys
are dotted for subsections (``solver.dt``), and potential/initial-condition
values are tagged expressions::

    V = sum[quadratic{2.0};power{2.83,0.25}]
    W = quadratic{0.5}
    initial = gaussian{0.3}

Parsing collects every error (with line and column) before failing, so a
config is either fully validated or reported wholesale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .density_solver import SolverConfig
from .mass_solver import MassSolverConfig
from .model import (
    CompactBumpField,
    DensityState,
    ModelParams,
    PotentialSpec,
    PowerField,
    QuadraticField,
    RadialField,
    SumField,
    VolumetricGrid,
    ZeroField,
)

MODES = ("density", "mass", "both", "stationary", "sweep", "convergence")


@dataclass
class ConfigIssue:
    line: int
    column: int
    message: str

    def __str__(self):
        return f"line {self.line}, col {self.column}: {self.message}"


class ConfigError(ValueError):
    """Raised with the complete list of problems found in a config."""

    def __init__(self, issues: list[ConfigIssue]):
        self.issues = issues
        super().__init__("invalid config:\n" + "\n".join(f"  {i}" for i in issues))


@dataclass
class InitialCondition:
    tag: str                      # uniform | gaussian | step | file
    args: tuple = ()

    def expression(self) -> str:
        if not self.args:
            return self.tag
        inner = ",".join(str(a) for a in self.args)
        return f"{self.tag}{{{inner}}}"


@dataclass
class ExperimentConfig:
    params: ModelParams
    potential: PotentialSpec
    initial: InitialCondition
    solver: SolverConfig
    mass_solver: MassSolverConfig
    mode: str = "density"
    n_cells: int = 256
    record_every: int = 1
    output_dir: str = "out"
    sweep: dict[str, list[str]] = field(default_factory=dict)
    levels: int = 3
    seed: int = 0
    source_text: str = ""

    def canonical_text(self) -> str:
        """Normalized config echo used for hashing and reproduction."""
        lines = [
            f"m = {self.params.m!r}",
            f"d = {self.params.d}",
            f"R = {self.params.R!r}",
            f"mass0 = {self.params.mass0!r}",
            f"T = {self.params.T!r}",
            f"cells = {self.n_cells}",
            f"V = {self.potential.V.expression()}",
            f"W = {self.potential.W.expression()}",
            f"initial = {self.initial.expression()}",
            f"mode = {self.mode}",
            f"record_every = {self.record_every}",
            f"seed = {self.seed}",
            f"levels = {self.levels}",
        ]
        for name in ("dt", "cfl_safety", "picard_tol", "picard_max_iter",
                     "rho_floor", "k_reg", "method", "newton_tol"):
            lines.append(f"solver.{name} = {getattr(self.solver, name)!r}")
        for name in ("dt", "slope_floor", "hold_boundary", "dirac_threshold",
                     "method", "k_reg"):
            lines.append(f"mass.{name} = {getattr(self.mass_solver, name)!r}")
        for key in sorted(self.sweep):
            lines.append(f"sweep.{key} = {', '.join(self.sweep[key])}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Tagged expressions
# ---------------------------------------------------------------------------

def parse_field_expression(text: str) -> RadialField:
    """Parse a radial-field expression; raises ValueError with the offset."""
    expr, pos = _parse_field(text.strip(), 0)
    if pos != len(text.strip()):
        raise ValueError(f"trailing characters at offset {pos}")
    return expr


def _parse_field(s: str, pos: int) -> tuple[RadialField, int]:
    name, pos = _read_name(s, pos)
    if name == "zero":
        return ZeroField(), pos
    if name == "quadratic":
        args, pos = _read_args(s, pos, 1, name)
        return QuadraticField(args[0]), pos
    if name == "power":
        args, pos = _read_args(s, pos, 2, name)
        if args[1] <= 0:
            raise ValueError(f"power exponent must be positive at offset {pos}")
        return PowerField(args[0], args[1]), pos
    if name == "compact_bump":
        args, pos = _read_args(s, pos, 2, name)
        if args[1] <= 0:
            raise ValueError(f"bump radius must be positive at offset {pos}")
        return CompactBumpField(args[0], args[1]), pos
    if name == "sum":
        if pos >= len(s) or s[pos] != "[":
            raise ValueError(f"expected '[' after sum at offset {pos}")
        pos += 1
        parts = []
        while True:
            part, pos = _parse_field(s, pos)
            parts.append(part)
            if pos < len(s) and s[pos] == ";":
                pos += 1
                continue
            if pos < len(s) and s[pos] == "]":
                return SumField(tuple(parts)), pos + 1
            raise ValueError(f"expected ';' or ']' at offset {pos}")
    raise ValueError(f"unknown field tag '{name}'")


def _read_name(s: str, pos: int) -> tuple[str, int]:
    start = pos
    while pos < len(s) and (s[pos].isalnum() or s[pos] == "_"):
        pos += 1
    if pos == start:
        raise ValueError(f"expected a tag name at offset {pos}")
    return s[start:pos], pos


def _read_args(s: str, pos: int, count: int, name: str) -> tuple[list[float], int]:
    if pos >= len(s) or s[pos] != "{":
        raise ValueError(f"expected '{{' after {name} at offset {pos}")
    end = s.find("}", pos)
    if end < 0:
        raise ValueError(f"unclosed '{{' at offset {pos}")
    raw = s[pos + 1:end]
    parts = [p.strip() for p in raw.split(",")] if raw.strip() else []
    if len(parts) != count:
        raise ValueError(f"{name} takes {count} argument(s), got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"bad numeric argument in {name}{{{raw}}}") from exc
    return vals, end + 1


def parse_initial_expression(text: str) -> InitialCondition:
    text = text.strip()
    name_end = 0
    while name_end < len(text) and (text[name_end].isalnum() or text[name_end] == "_"):
        name_end += 1
    tag, rest = text[:name_end], text[name_end:]
    if tag == "uniform":
        if rest:
            raise ValueError("uniform takes no arguments")
        return InitialCondition("uniform")
    if tag in ("gaussian", "step"):
        args, pos = _read_args(text, name_end, 1, tag)
        if rest[pos - name_end:]:
            raise ValueError("trailing characters after initial condition")
        if args[0] <= 0:
            raise ValueError(f"{tag} argument must be positive")
        return InitialCondition(tag, (args[0],))
    if tag == "file":
        if not (rest.startswith("{") and rest.endswith("}")):
            raise ValueError("file takes a single {path} argument")
        return InitialCondition("file", (rest[1:-1],))
    raise ValueError(f"unknown initial condition '{tag}'")


# ---------------------------------------------------------------------------
# Key=value parsing
# ---------------------------------------------------------------------------

_KNOWN_KEYS = {
    "m", "d", "R", "mass0", "T", "cells", "V", "W", "initial", "mode",
    "record_every", "seed", "levels", "output.dir",
    "solver.dt", "solver.method", "solver.cfl_safety", "solver.picard_tol",
    "solver.picard_max_iter", "solver.rho_floor", "solver.k_reg",
    "solver.newton_tol",
    "mass.dt", "mass.method", "mass.slope_floor", "mass.hold_boundary",
    "mass.dirac_threshold", "mass.k_reg",
}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config; raises :class:`ConfigError` listing every
    problem found (unknown keys, duplicates, malformed expressions,
    out-of-range parameters) with line/position information."""
    issues: list[ConfigIssue] = []
    seen: dict[str, int] = {}
    values: dict[str, tuple[str, int, int]] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "=" not in line:
            issues.append(ConfigIssue(lineno, 1, "expected 'key = value'"))
            continue
        key, _, value = line.partition("=")
        col = line.index("=") + 2
        key = key.strip()
        value = value.strip()
        if not key:
            issues.append(ConfigIssue(lineno, 1, "missing key before '='"))
            continue
        if key in seen and not key.startswith("sweep."):
            issues.append(ConfigIssue(
                lineno, 1,
                f"duplicate key '{key}' (first set on line {seen[key]})"))
            continue
        seen[key] = lineno
        if key not in _KNOWN_KEYS and not key.startswith("sweep."):
            issues.append(ConfigIssue(lineno, 1, f"unknown key '{key}'"))
            continue
        values[key] = (value, lineno, col)

    def take(key, default=None):
        return values.pop(key, (default, 0, 0))

    def num(key, cast, default, check=None, message=None):
        value, lineno, col = take(key, None)
        if value is None:
            return default
        try:
            out = cast(value)
        except (TypeError, ValueError):
            issues.append(ConfigIssue(lineno, col, f"{key}: not a valid "
                                      f"{cast.__name__}: '{value}'"))
            return default
        if check is not None and not check(out):
            issues.append(ConfigIssue(lineno, col, message or
                                      f"{key}: value {out} out of range"))
            return default
        return out

    def boolean(key, default):
        value, lineno, col = take(key, None)
        if value is None:
            return default
        low = value.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        issues.append(ConfigIssue(lineno, col, f"{key}: expected a boolean, "
                                  f"got '{value}'"))
        return default

    m = num("m", float, 0.5, lambda x: 0.0 < x < 1.0,
            "m out of fast-diffusion range (0,1)")
    d = num("d", int, 1, lambda x: x >= 1, "d must be an integer >= 1")
    R = num("R", float, 1.0, lambda x: x > 0, "R must be positive")
    mass0 = num("mass0", float, 1.0, lambda x: x > 0, "mass0 must be positive")
    T = num("T", float, 1.0, lambda x: x > 0, "T must be positive")
    cells = num("cells", int, 256, lambda x: x >= 4, "cells must be >= 4")
    record_every = num("record_every", int, 1, lambda x: x >= 1,
                       "record_every must be >= 1")
    seed = num("seed", int, 0)
    levels = num("levels", int, 3, lambda x: x >= 2, "levels must be >= 2")

    def fieldexpr(key, default):
        value, lineno, col = take(key, None)
        if value is None:
            return default
        try:
            return parse_field_expression(value)
        except ValueError as exc:
            issues.append(ConfigIssue(lineno, col, f"{key}: {exc}"))
            return default

    V = fieldexpr("V", ZeroField())
    W = fieldexpr("W", ZeroField())

    value, lineno, col = take("initial", None)
    initial = InitialCondition("uniform")
    if value is not None:
        try:
            initial = parse_initial_expression(value)
        except ValueError as exc:
            issues.append(ConfigIssue(lineno, col, f"initial: {exc}"))

    value, lineno, col = take("mode", None)
    mode = "density"
    if value is not None:
        if value not in MODES:
            issues.append(ConfigIssue(lineno, col,
                                      f"mode must be one of {', '.join(MODES)}"))
        else:
            mode = value

    output_dir = take("output.dir", "out")[0] or "out"

    def optional_k(key):
        value, lineno, col = take(key, None)
        if value in (None, "", "none"):
            return None
        return num_value(value, lineno, col, key)

    def num_value(value, lineno, col, key):
        try:
            out = float(value)
        except ValueError:
            issues.append(ConfigIssue(lineno, col, f"{key}: not a number"))
            return None
        if out < 1.0:
            issues.append(ConfigIssue(lineno, col, f"{key}: must be >= 1"))
            return None
        return out

    solver_kwargs = dict(
        dt=num("solver.dt", float, 1e-3, lambda x: x > 0, "solver.dt must be positive"),
        cfl_safety=num("solver.cfl_safety", float, 0.8, lambda x: 0 < x <= 1,
                       "solver.cfl_safety must be in (0,1]"),
        picard_tol=num("solver.picard_tol", float, 1e-10, lambda x: x > 0,
                       "solver.picard_tol must be positive"),
        picard_max_iter=num("solver.picard_max_iter", int, 30, lambda x: x >= 1),
        rho_floor=num("solver.rho_floor", float, 1e-12, lambda x: x >= 0,
                      "solver.rho_floor must be nonnegative"),
        newton_tol=num("solver.newton_tol", float, 1e-13, lambda x: x > 0),
        k_reg=optional_k("solver.k_reg"),
    )
    value, lineno, col = take("solver.method", None)
    if value is not None:
        if value not in ("implicit", "explicit"):
            issues.append(ConfigIssue(lineno, col,
                                      "solver.method must be implicit or explicit"))
        else:
            solver_kwargs["method"] = value

    mass_kwargs = dict(
        dt=num("mass.dt", float, 1e-3, lambda x: x > 0, "mass.dt must be positive"),
        slope_floor=num("mass.slope_floor", float, 1e-10, lambda x: x > 0,
                        "mass.slope_floor must be positive"),
        hold_boundary=boolean("mass.hold_boundary", True),
        dirac_threshold=num("mass.dirac_threshold", float, 1e-4, lambda x: x >= 0,
                            "mass.dirac_threshold must be nonnegative"),
        k_reg=optional_k("mass.k_reg"),
    )
    value, lineno, col = take("mass.method", None)
    if value is not None:
        if value not in ("implicit", "explicit"):
            issues.append(ConfigIssue(lineno, col,
                                      "mass.method must be implicit or explicit"))
        else:
            mass_kwargs["method"] = value

    sweep: dict[str, list[str]] = {}
    for key in [k for k in values if k.startswith("sweep.")]:
        value, lineno, col = values.pop(key)
        target = key[len("sweep."):]
        if target not in _KNOWN_KEYS:
            issues.append(ConfigIssue(lineno, col, f"sweep over unknown key "
                                      f"'{target}'"))
            continue
        items = [p.strip() for p in value.split(",") if p.strip()]
        if not items:
            issues.append(ConfigIssue(lineno, col, "empty sweep list"))
            continue
        sweep[target] = items

    if issues:
        raise ConfigError(sorted(issues, key=lambda i: (i.line, i.column)))

    params = ModelParams(m=m, d=d, R=R, mass0=mass0, T=T)
    potential = PotentialSpec(V=V, W=W)
    potential.check_nonnegative(R)
    return ExperimentConfig(params=params, potential=potential, initial=initial,
                            solver=SolverConfig(**solver_kwargs),
                            mass_solver=MassSolverConfig(**mass_kwargs),
                            mode=mode, n_cells=cells, record_every=record_every,
                            output_dir=output_dir, sweep=sweep, levels=levels,
                            seed=seed, source_text=text)


# ---------------------------------------------------------------------------
# Initial conditions
# ---------------------------------------------------------------------------

def build_initial(config: ExperimentConfig, grid: VolumetricGrid) -> DensityState:
    """Materialize the configured initial condition on a grid.

    Analytic shapes are cell averaged and renormalized so the discrete mass
    equals ``mass0`` exactly; a file IC must match the grid and carry the
    right mass already.
    """
    params = grid.params
    ic = config.initial
    if ic.tag == "uniform":
        rho = np.full(grid.n_cells, params.mass0 / params.R_v)
    elif ic.tag == "gaussian":
        sigma = ic.args[0]
        rho = grid.cell_average(
            lambda v: np.exp(-grid.params.r_of_v(v) ** 2 / (2.0 * sigma ** 2)))
        rho = rho * (params.mass0 / float(rho @ grid.dv))
    elif ic.tag == "step":
        r0 = min(ic.args[0], params.R)
        v0 = params.v_of_r(r0)
        inside = np.clip((v0 - grid.v_edges[:-1]) / grid.dv, 0.0, 1.0)
        rho = inside * (params.mass0 / v0)
    elif ic.tag == "file":
        data = np.loadtxt(ic.args[0], delimiter=",", skiprows=1)
        if data.ndim != 2 or data.shape[0] != grid.n_cells:
            raise ValueError(f"initial-condition file needs {grid.n_cells} rows "
                             "of 'v_center,rho'")
        rho = np.asarray(data[:, 1], dtype=float)
        if np.any(rho < 0):
            raise ValueError("initial-condition file contains negative densities")
        mass = float(rho @ grid.dv)
        if abs(mass - params.mass0) > 1e-8 * params.mass0:
            raise ValueError(f"initial-condition file mass {mass} does not match "
                             f"mass0={params.mass0}")
    else:  # pragma: no cover - parse_initial_expression guards tags
        raise ValueError(f"unknown initial condition {ic.tag}")
    return DensityState(t=0.0, rho=rho, params=params, grid=grid)


# ---------------------------------------------------------------------------
# Hypothesis checks
# ---------------------------------------------------------------------------

@dataclass
class HypothesisVerdict:
    name: str
    status: str            # holds | fails | not-checkable
    detail: str
    witness: float | None = None


def check_hypotheses(config: ExperimentConfig) -> dict[str, HypothesisVerdict]:
    """Evaluate the structural hypotheses on the configured problem.

    Symbolic facts (the dimension-dependent exponent threshold) are computed
    exactly; regularity and growth conditions are sampled on linear and
    logarithmic radius grids, with the worst witness point reported.  The
    report never blocks a run; it is attached to the manifest so failures
    (for instance a potential whose Hessian blows up at the origin) are
    visible next to the results they may explain.
    """
    params = config.params
    pot = config.potential
    R, d, m = params.R, params.d, params.m
    out: dict[str, HypothesisVerdict] = {}

    r_in = np.linspace(1e-9 * R, R, 801)
    r_tail = np.geomspace(1e-6 * R, 1e3 * R, 601)

    # H0: bounded Hessians, nonnegativity, boundary flux
    issues = []
    witness = None
    for name, fld, rr in (("V", pot.V, r_in), ("W", pot.W, np.linspace(1e-9 * R, 2 * R, 801))):
        second = np.asarray(fld.second_deriv(rr))
        bad = ~np.isfinite(second) | (np.abs(second) > 1e12)
        if bad.any():
            witness = float(rr[np.argmax(bad)])
            issues.append(f"{name}'' unbounded near r={witness:.3g}")
        if np.any(np.asarray(fld.value(rr)) < -1e-13):
            issues.append(f"{name} takes negative values")
    vpR = float(pot.V.deriv(np.array(R)))
    detail = "V, W in W^{2,inf} and nonnegative"
    if abs(vpR) > 1e-12:
        detail += (f"; boundary flux V'(R)={vpR:.3g} != 0 is hard-zeroed by the "
                   "no-flux scheme (boundary-modification convention)")
    out["H0"] = HypothesisVerdict(
        "H0", "fails" if issues else "holds",
        "; ".join(issues) if issues else detail, witness)

    fmin = -params.mass0 * params.R_v ** (1.0 - m) / (1.0 - m)
    out["H1"] = HypothesisVerdict(
        "H1", "holds", f"free energy on the ball bounded below by {fmin:.6g} "
        "(V, W >= 0)")

    threshold = (1.0 + d - math.sqrt(2.0 * d + 1.0)) / d
    out["H2"] = HypothesisVerdict(
        "H2", "holds" if m > threshold else "fails",
        f"m={m} vs threshold (1+d-sqrt(2d+1))/d = {threshold:.6g}")

    pmom = 2.0 / (1.0 - m)
    grid = VolumetricGrid.uniform(params, 1024)
    rho0 = build_initial(config, grid) if config.initial.tag != "file" else None
    if rho0 is None:
        out["H3"] = HypothesisVerdict("H3", "not-checkable",
                                      "file initial condition; checked at run time")
    else:
        mom = float(rho0.rho @ (grid.cell_average(
            lambda v: grid.params.r_of_v(v) ** pmom) * grid.dv))
        out["H3"] = HypothesisVerdict(
            "H3", "holds", f"int |x|^{{{pmom:.3g}}} rho0 = {mom:.6g} (finite on the ball)")

    def growth_constant(fld, rr):
        grad = np.abs(np.asarray(fld.deriv(rr)))
        ratio = grad / (1.0 + rr)
        i = int(np.argmax(ratio))
        return float(ratio[i]), float(rr[i]), bool(np.all(np.isfinite(ratio)))

    for name, key in (("V", "H4"), ("W", "H5")):
        fld = pot.V if name == "V" else pot.W
        c, rw, finite = growth_constant(fld, r_tail)
        ok = finite and c < 1e9
        out[key] = HypothesisVerdict(
            key, "holds" if ok else "fails",
            f"sup |grad {name}|/(1+|x|) ~ {c:.6g} (sampled)", None if ok else rw)

    def laplacian_sup(fld, rr):
        lap = np.asarray(fld.second_deriv(rr)) + (d - 1) * np.asarray(fld.deriv(rr)) / rr
        i = int(np.argmax(np.abs(lap)))
        return float(np.abs(lap[i])), float(rr[i]), bool(np.all(np.isfinite(lap)))

    supV, rV, okV = laplacian_sup(pot.V, r_tail)
    supW, rW, okW = laplacian_sup(pot.W, r_tail)
    bounded = okV and okW and supV < 1e9 and supW < 1e9
    out["H6"] = HypothesisVerdict(
        "H6", "holds" if bounded else "fails",
        f"sup |Delta V| ~ {supV:.6g}, sup |Delta W| ~ {supW:.6g} (sampled)",
        None if bounded else (rV if supV >= supW else rW))

    if pot.W.is_zero or pot.W.support_radius is not None:
        out["H7"] = HypothesisVerdict("H7", "holds",
                                      "W has compact support (tail ratio -> 0)")
    elif pot.V.is_zero:
        out["H7"] = HypothesisVerdict("H7", "not-checkable", "V vanishes; the "
                                      "tail ratio |grad W|/V is undefined")
    else:
        sigmas = np.geomspace(R, 1e4 * R, 25)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.abs(np.asarray(pot.W.deriv(sigmas))) / np.asarray(
                pot.V.value(sigmas))
        decays = bool(np.all(np.isfinite(ratios))) and ratios[-1] < 1e-2 * (
            ratios[0] + 1e-300)
        out["H7"] = HypothesisVerdict(
            "H7", "holds" if decays else "fails",
            f"tail ratio |grad W|/V: {ratios[0]:.3g} at R -> {ratios[-1]:.3g} "
            f"at 1e4 R", None if decays else float(sigmas[-1]))

    if pot.V.is_zero:
        out["H8"] = HypothesisVerdict("H8", "holds", "V = 0: C(K) = 0")
    else:
        rx = np.linspace(0.0, R, 41)
        ry = np.geomspace(1e-3 * R, 1e3 * R, 201)
        vy = np.asarray(pot.V.value(ry))
        worst = 0.0
        wpoint = None
        for x in rx:
            vals = np.asarray(pot.V.value(ry + x)) / (1.0 + vy)
            i = int(np.argmax(vals))
            if vals[i] > worst:
                worst, wpoint = float(vals[i]), float(ry[i])
        ok = np.isfinite(worst) and worst < 1e9
        out["H8"] = HypothesisVerdict(
            "H8", "holds" if ok else "fails",
            f"C(K) ~ {worst:.6g} (sampled over x in [0,R], y up to 1e3 R)",
            None if ok else wpoint)
    return out
