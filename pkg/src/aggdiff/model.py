"""Domain types and volumetric-coordinate calculus for radial aggregation-diffusion.

Everything downstream works in the volume variable ``v = |B_1| r^d`` on the ball
of radius ``R``: cell mass is then ``rho * dv`` exactly, the boundary flux
telescopes, and the cumulative mass ``M`` is piecewise linear on the grid.
This module provides

* the model/grid/state containers (:class:`ModelParams`, :class:`VolumetricGrid`,
  :class:`DensityState`, :class:`MassProfile`),
* radial potential descriptors and :class:`PotentialSpec`,
* the geometric factor :func:`kappa`, the radial convolution ``W * rho`` with
  its radial derivative, and the volumetric drift operator
  :func:`volumetric_drift`,
* the diffusion nonlinearity ``s^m`` and its uniformly elliptic regularization
  ladder (:class:`PowerDiffusion`, :class:`RegularizedDiffusion`) together with
  the auxiliary functions ``psi`` and ``g_phi``.

All operations are pure functions of their inputs; the only shared state is a
memo cache of convolution kernel matrices keyed by grid identity, which is
rebuilt deterministically on a miss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable
from weakref import WeakKeyDictionary

import numpy as np


class QuadratureError(RuntimeError):
    """Angular quadrature failed to reach the requested tolerance.

    Carries ``achieved`` (the last relative-change estimate) so callers can
    decide whether to accept the value anyway.
    """

    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved relative change {achieved:.3e})")
        self.achieved = achieved


def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball in dimension ``d`` (2 for d=1, pi for d=2, ...)."""
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0)


# ---------------------------------------------------------------------------
# Model parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of one problem instance.

    ``m`` is the diffusion exponent, restricted to the fast-diffusion range
    ``0 < m < 1``; ``d`` the spatial dimension; ``R`` the ball radius;
    ``mass0`` the total mass of the initial datum; ``T`` the time horizon.
    """

    m: float
    d: int
    R: float
    mass0: float
    T: float

    def __post_init__(self):
        if not 0.0 < self.m < 1.0:
            raise ValueError(f"m={self.m} out of fast-diffusion range (0,1)")
        if self.d < 1 or int(self.d) != self.d:
            raise ValueError(f"dimension d={self.d} must be an integer >= 1")
        if self.R <= 0:
            raise ValueError("ball radius R must be positive")
        if self.mass0 <= 0:
            raise ValueError("mass0 must be positive")
        if self.T <= 0:
            raise ValueError("time horizon T must be positive")

    @property
    def omega(self) -> float:
        """Unit-ball volume |B_1| in dimension d."""
        return unit_ball_volume(self.d)

    @property
    def R_v(self) -> float:
        """Total volume |B_R| = |B_1| R^d, the right endpoint in v."""
        return self.omega * self.R ** self.d

    def r_of_v(self, v):
        """Radius of the centred ball with volume v."""
        return (np.asarray(v, dtype=float) / self.omega) ** (1.0 / self.d)

    def v_of_r(self, r):
        """Volume of the centred ball with radius r."""
        return self.omega * np.asarray(r, dtype=float) ** self.d


def kappa(v, params: ModelParams):
    """Surface-area factor ``kappa(v) = d |B_1|^{1/d} v^{(d-1)/d}``.

    This is the area of the sphere bounding the centred ball of volume ``v``;
    it converts between radial and volumetric derivatives
    (``d/dr = kappa(v) d/dv``) and enters the mass equation as ``kappa^2``.
    For ``d = 1`` it is the constant 2.

    Raises ``ValueError`` on negative volumes.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("kappa: negative volume")
    d = params.d
    if d == 1:
        return np.full_like(v, 2.0) if v.ndim else 2.0
    out = d * params.omega ** (1.0 / d) * v ** ((d - 1.0) / d)
    return out


# ---------------------------------------------------------------------------
# Radial potential descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialField:
    """Base class for radial scalar fields ``x -> f(|x|)``.

    Subclasses implement ``value``, ``deriv`` and ``second_deriv`` on radii
    ``r >= 0`` (vectorized).  ``support_radius`` is the radius of the support
    when compact, else ``None``; ``quadratic_coeff`` is ``a`` when the field
    is exactly ``a r^2``, else ``None``.
    """

    def value(self, r):  # pragma: no cover - abstract
        raise NotImplementedError

    def deriv(self, r):  # pragma: no cover - abstract
        raise NotImplementedError

    def second_deriv(self, r):  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def is_zero(self) -> bool:
        return False

    @property
    def support_radius(self) -> float | None:
        return None

    @property
    def quadratic_coeff(self) -> float | None:
        return None

    def expression(self) -> str:  # pragma: no cover - abstract
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroField(RadialField):
    def value(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def deriv(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    def second_deriv(self, r):
        return np.zeros_like(np.asarray(r, dtype=float))

    @property
    def is_zero(self) -> bool:
        return True

    @property
    def support_radius(self) -> float | None:
        return 0.0

    def expression(self) -> str:
        return "zero"


@dataclass(frozen=True)
class QuadraticField(RadialField):
    """``a |x|^2``."""

    a: float

    def value(self, r):
        return self.a * np.asarray(r, dtype=float) ** 2

    def deriv(self, r):
        return 2.0 * self.a * np.asarray(r, dtype=float)

    def second_deriv(self, r):
        return np.full_like(np.asarray(r, dtype=float), 2.0 * self.a)

    @property
    def quadratic_coeff(self) -> float | None:
        return self.a

    def expression(self) -> str:
        return f"quadratic{{{self.a!r}}}"


@dataclass(frozen=True)
class PowerField(RadialField):
    """``a |x|^p`` with ``a, p > 0``."""

    a: float
    p: float

    def value(self, r):
        return self.a * np.asarray(r, dtype=float) ** self.p

    def deriv(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.a * self.p * r ** (self.p - 1.0)
        if self.p > 1.0:
            out = np.where(r == 0.0, 0.0, out)
        return out

    def second_deriv(self, r):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.a * self.p * (self.p - 1.0) * r ** (self.p - 2.0)
        if self.p > 2.0:
            out = np.where(r == 0.0, 0.0, out)
        return out

    @property
    def quadratic_coeff(self) -> float | None:
        return self.a if self.p == 2.0 else None

    def expression(self) -> str:
        return f"power{{{self.a!r},{self.p!r}}}"


@dataclass(frozen=True)
class CompactBumpField(RadialField):
    """Smooth bump ``a exp(1 - r0^2/(r0^2 - r^2))`` supported on ``r < r0``."""

    a: float
    r0: float

    def _inner(self, r):
        r = np.asarray(r, dtype=float)
        inside = r < self.r0
        q = np.where(inside, self.r0 ** 2 - r ** 2, 1.0)
        with np.errstate(over="ignore"):
            val = np.where(inside, np.exp(1.0 - self.r0 ** 2 / q), 0.0)
        return r, inside, q, val

    def value(self, r):
        _, _, _, val = self._inner(r)
        return self.a * val

    def deriv(self, r):
        r, inside, q, val = self._inner(r)
        # d/dr [-r0^2/(r0^2-r^2)] = -2 r r0^2 / q^2
        return self.a * np.where(inside, val * (-2.0 * r * self.r0 ** 2 / q ** 2), 0.0)

    def second_deriv(self, r):
        r, inside, q, val = self._inner(r)
        g = -2.0 * r * self.r0 ** 2 / q ** 2
        gp = -2.0 * self.r0 ** 2 * (q + 4.0 * r ** 2) / q ** 3
        return self.a * np.where(inside, val * (g * g + gp), 0.0)

    @property
    def support_radius(self) -> float | None:
        return self.r0

    def expression(self) -> str:
        return f"compact_bump{{{self.a!r},{self.r0!r}}}"


@dataclass(frozen=True)
class SumField(RadialField):
    parts: tuple[RadialField, ...]

    def value(self, r):
        return sum(p.value(r) for p in self.parts)

    def deriv(self, r):
        return sum(p.deriv(r) for p in self.parts)

    def second_deriv(self, r):
        return sum(p.second_deriv(r) for p in self.parts)

    @property
    def is_zero(self) -> bool:
        return all(p.is_zero for p in self.parts)

    @property
    def support_radius(self) -> float | None:
        radii = [p.support_radius for p in self.parts]
        if any(s is None for s in radii):
            return None
        return max(radii) if radii else 0.0

    @property
    def quadratic_coeff(self) -> float | None:
        coeff = 0.0
        for p in self.parts:
            if p.is_zero:
                continue
            c = p.quadratic_coeff
            if c is None:
                return None
            coeff += c
        return coeff if coeff != 0.0 else None

    def expression(self) -> str:
        return "sum[" + ";".join(p.expression() for p in self.parts) + "]"


@dataclass(frozen=True)
class PotentialSpec:
    """Confinement potential V and interaction kernel W, both radial.

    The operational kernel is ``K(x, y) = W(x - y)`` (no cut-off).  The flags
    record structure the solvers exploit: ``W_is_quadratic`` enables the exact
    moment reduction of the convolution for ``W = a |x|^2``.
    """

    V: RadialField
    W: RadialField

    @property
    def V_compact_support(self) -> bool:
        return self.V.support_radius is not None

    @property
    def W_compact_support(self) -> bool:
        return self.W.support_radius is not None

    @property
    def W_is_quadratic(self) -> bool:
        return self.W.is_zero or self.W.quadratic_coeff is not None

    def check_nonnegative(self, R: float, samples: int = 257) -> None:
        """Reject potentials taking negative values on the relevant radii."""
        r = np.linspace(0.0, R, samples)
        if np.any(self.V.value(r) < -1e-13):
            raise ValueError("V must be nonnegative on [0, R]")
        if np.any(self.W.value(2.0 * r) < -1e-13):
            raise ValueError("W must be nonnegative on [0, 2R]")


# ---------------------------------------------------------------------------
# Grid and states
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VolumetricGrid:
    """Uniform-in-volume finite-volume grid on ``[0, R_v]``.

    ``v_edges`` has ``n_cells + 1`` strictly increasing entries from 0 to
    ``R_v``; cell ``i`` spans ``[v_edges[i], v_edges[i+1]]`` and carries the
    density value ``rho[i]``.
    """

    params: ModelParams
    n_cells: int
    v_edges: np.ndarray
    v_centers: np.ndarray

    @classmethod
    def uniform(cls, params: ModelParams, n_cells: int) -> "VolumetricGrid":
        if n_cells < 4:
            raise ValueError("need at least 4 cells")
        v_edges = np.linspace(0.0, params.R_v, n_cells + 1)
        v_centers = 0.5 * (v_edges[:-1] + v_edges[1:])
        return cls(params=params, n_cells=n_cells, v_edges=v_edges, v_centers=v_centers)

    def __post_init__(self):
        if self.v_edges[0] != 0.0 or not np.isclose(self.v_edges[-1], self.params.R_v):
            raise ValueError("v_edges must run from 0 to R_v")
        if np.any(np.diff(self.v_edges) <= 0):
            raise ValueError("v_edges must be strictly increasing")
        self.dv = np.diff(self.v_edges)
        self.r_edges = self.params.r_of_v(self.v_edges)
        self.r_centers = self.params.r_of_v(self.v_centers)
        self.kappa_edges = kappa(self.v_edges, self.params)
        self.kappa_centers = kappa(self.v_centers, self.params)

    def same_geometry(self, other: "VolumetricGrid") -> bool:
        return (
            self.n_cells == other.n_cells
            and self.params.d == other.params.d
            and np.allclose(self.v_edges, other.v_edges)
        )

    def cell_average(self, f: Callable, order: int = 4) -> np.ndarray:
        """Per-cell averages of ``f(v)`` by fixed-order Gauss-Legendre."""
        nodes, weights = _gl_nodes(order)
        a = self.v_edges[:-1][:, None]
        h = self.dv[:, None]
        vals = f(a + h * nodes[None, :])
        return vals @ weights


@dataclass
class DensityState:
    """Radial density sampled per volumetric cell at one time."""

    t: float
    rho: np.ndarray
    params: ModelParams
    grid: VolumetricGrid

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        if self.rho.shape != (self.grid.n_cells,):
            raise ValueError("rho must have one value per cell")

    @property
    def mass(self) -> float:
        return float(self.rho @ self.grid.dv)

    def mass_profile(self) -> "MassProfile":
        M = np.concatenate(([0.0], np.cumsum(self.rho * self.grid.dv)))
        return MassProfile(t=self.t, M=M, mass0=self.params.mass0, grid=self.grid)

    def copy(self, t: float | None = None, rho: np.ndarray | None = None) -> "DensityState":
        return DensityState(
            t=self.t if t is None else t,
            rho=self.rho.copy() if rho is None else np.asarray(rho, dtype=float),
            params=self.params,
            grid=self.grid,
        )


@dataclass
class MassProfile:
    """Cumulative mass ``M(v)`` at the grid edges; the mass-equation unknown."""

    t: float
    M: np.ndarray
    mass0: float
    grid: VolumetricGrid

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        if self.M.shape != (self.grid.n_cells + 1,):
            raise ValueError("M must have one value per edge")

    def slopes(self) -> np.ndarray:
        """Per-cell one-sided slopes dM/dv; equals the cell densities."""
        return np.diff(self.M) / self.grid.dv

    def density_state(self) -> DensityState:
        return DensityState(t=self.t, rho=self.slopes(), params=self.grid.params, grid=self.grid)

    def copy(self, t: float | None = None, M: np.ndarray | None = None) -> "MassProfile":
        return MassProfile(
            t=self.t if t is None else t,
            M=self.M.copy() if M is None else np.asarray(M, dtype=float),
            mass0=self.mass0,
            grid=self.grid,
        )


# ---------------------------------------------------------------------------
# Radial convolution
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _gl_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


_ANGULAR_TOL = 1e-8
_ANGULAR_MAX_ORDER = 1024
_RADIAL_GL_ORDER = 4

# grid -> {(W, where, kind): matrix}; rebuilt deterministically on miss
_kernel_cache: "WeakKeyDictionary[VolumetricGrid, dict]" = WeakKeyDictionary()


def _sphere_avg_const(d: int) -> float:
    """|S^{d-2}| / |S^{d-1}|, the normalization of the polar-angle average."""
    return math.gamma(d / 2.0) / (math.sqrt(math.pi) * math.gamma((d - 1) / 2.0))


def _sphere_avg_d3(W: RadialField, r: np.ndarray, s: np.ndarray,
                   derivative: bool) -> np.ndarray:
    """d = 3 sphere average by the exact chord substitution q = |r e1 - s theta|.

    The polar-angle integral reduces to a smooth 1D integral over
    ``q in [|r-s|, r+s]``; compact supports are clipped exactly so a fixed
    Gauss-Legendre order suffices.
    """
    r, s = np.broadcast_arrays(np.asarray(r, float), np.asarray(s, float))
    q_lo = np.abs(r - s)
    q_hi = r + s
    if W.support_radius is not None:
        q_hi = np.minimum(q_hi, W.support_radius)
    width = np.maximum(q_hi - q_lo, 0.0)
    nodes, weights = _gl_nodes(48)
    q = q_lo[..., None] + width[..., None] * nodes
    r_safe = np.where(r > 0.0, r, 1.0)
    s_safe = np.where(s > 0.0, s, 1.0)
    if derivative:
        integrand = W.deriv(q) * (r[..., None] ** 2 - s[..., None] ** 2 + q ** 2)
        pref = width / (4.0 * r_safe ** 2 * s_safe)
    else:
        integrand = W.value(q) * q
        pref = width / (2.0 * r_safe * s_safe)
    out = pref * (integrand @ weights)
    # r = 0 or s = 0: the average degenerates to a point evaluation
    center = (r == 0.0) | (s == 0.0)
    if np.any(center):
        rr = np.maximum(r, s)
        out = np.where(center, 0.0 if derivative else W.value(rr), out)
        if derivative:
            # at s=0 the source is a point at the origin: d/dr W(r)
            out = np.where(center & (s == 0.0) & (r > 0.0), W.deriv(r), out)
    return out


def _angular_average(W: RadialField, r: np.ndarray, s: np.ndarray, d: int,
                     derivative: bool) -> np.ndarray:
    """Average of ``W(|r e1 - s theta|)`` (or of ``e1 . grad W``) over the sphere.

    ``r`` and ``s`` are broadcast together.  For ``d = 1`` the sphere is the
    two-point set, handled exactly; for ``d >= 2`` the polar-angle integral is
    evaluated by Gauss-Legendre with the order doubled until the relative
    change drops below 1e-8.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    if d == 1:
        if derivative:
            # odd extension of the radial profile: d/dr W(|r -+ s|)
            diff = r - s
            near = W.deriv(np.abs(diff))
            near = np.where(diff == 0.0, 0.0, np.sign(diff) * near)
            return 0.5 * (near + W.deriv(r + s))
        return 0.5 * (W.value(np.abs(r - s)) + W.value(r + s))
    if d == 3:
        return _sphere_avg_d3(W, r, s, derivative)

    c_d = _sphere_avg_const(d)
    prev = None
    order = 8
    achieved = np.inf
    while order <= _ANGULAR_MAX_ORDER:
        t, w = _gl_nodes(order)
        phi = math.pi * t
        sin_phi = np.sin(phi)
        cos_phi = np.cos(phi)
        ang_w = math.pi * w * sin_phi ** (d - 2)
        q = np.sqrt(np.maximum(r[..., None] ** 2 + s[..., None] ** 2
                               - 2.0 * r[..., None] * s[..., None] * cos_phi, 0.0))
        if derivative:
            q_safe = np.maximum(q, 1e-30)
            integrand = W.deriv(q) * (r[..., None] - s[..., None] * cos_phi) / q_safe
        else:
            integrand = W.value(q)
        cur = c_d * (integrand @ ang_w)
        if prev is not None:
            scale = np.max(np.abs(cur)) + 1e-300
            achieved = float(np.max(np.abs(cur - prev))) / scale
            if achieved < _ANGULAR_TOL:
                return cur
        prev = cur
        order *= 2
    raise QuadratureError("angular quadrature did not converge", achieved)


def _kernel_matrix(grid: VolumetricGrid, W: RadialField, where: str,
                   derivative: bool) -> np.ndarray:
    """Matrix G with ``(W * rho)(r_i) = G @ rho`` for piecewise-constant rho.

    Row ``i`` integrates the spherical average of W (or of its radial
    derivative) against each source cell, with per-cell Gauss-Legendre in the
    volume variable.  Cached per (grid, W, where, derivative).
    """
    cache = _kernel_cache.setdefault(grid, {})
    key = (W, where, derivative)
    if key in cache:
        return cache[key]

    r_eval = grid.r_centers if where == "centers" else grid.r_edges
    nodes, weights = _gl_nodes(_RADIAL_GL_ORDER)
    # source quadrature points in v, mapped to radii
    v_src = grid.v_edges[:-1][:, None] + grid.dv[:, None] * nodes[None, :]
    s_src = grid.params.r_of_v(v_src)  # (n_cells, gl)

    n_eval = r_eval.shape[0]
    out = np.empty((n_eval, grid.n_cells))
    # chunk over evaluation points to bound the (eval, cell, gl, angle) workspace
    chunk = max(1, 25_000_000 // (grid.n_cells * _RADIAL_GL_ORDER * _ANGULAR_MAX_ORDER))
    for lo in range(0, n_eval, chunk):
        hi = min(lo + chunk, n_eval)
        rr = r_eval[lo:hi][:, None, None]
        ss = np.broadcast_to(s_src[None, :, :], (hi - lo,) + s_src.shape)
        avg = _angular_average(W, np.broadcast_to(rr, ss.shape), ss, grid.params.d,
                               derivative)
        out[lo:hi] = (avg @ weights) * grid.dv[None, :]
    cache[key] = out
    return out


def radial_convolution(rho: DensityState | np.ndarray, W: RadialField,
                       grid: VolumetricGrid, where: str = "centers",
                       point_mass: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Convolution ``(W * rho)(x)`` and its radial derivative on radial data.

    Parameters
    ----------
    rho:
        Density state or per-cell values (nonnegative).
    W:
        Radial interaction kernel; must be evaluable on ``[0, 2R]``.
    grid:
        Volumetric grid carrying the cells.
    where:
        ``"centers"`` or ``"edges"``: evaluation points.
    point_mass:
        Optional extra point mass at the origin (used for stationary states
        containing a Dirac); contributes ``point_mass * W(r)`` exactly.

    Returns
    -------
    (values, radial_derivative)
        Arrays at the requested points.  For quadratic ``W = a |x|^2`` the
        exact moment reduction ``W * rho = a (|x|^2 A + B)`` is used, with
        ``A`` the total mass and ``B`` the second moment (odd moments vanish
        for radial data); otherwise a cached spherical-quadrature kernel
        matrix is applied.
    """
    vals = rho.rho if isinstance(rho, DensityState) else np.asarray(rho, dtype=float)
    r = grid.r_centers if where == "centers" else grid.r_edges
    if W.is_zero:
        z = np.zeros_like(r)
        return z, z.copy()
    a = W.quadratic_coeff
    if a is not None:
        A = float(vals @ grid.dv) + point_mass
        B = float(vals @ (grid.cell_average(lambda v: grid.params.r_of_v(v) ** 2) * grid.dv))
        return a * (r ** 2 * A + B), 2.0 * a * A * r
    G = _kernel_matrix(grid, W, where, derivative=False)
    Gd = _kernel_matrix(grid, W, where, derivative=True)
    conv = G @ vals
    dconv = Gd @ vals
    if point_mass != 0.0:
        conv = conv + point_mass * W.value(r)
        dconv = dconv + point_mass * W.deriv(r)
    return conv, dconv


def interaction_energy(rho: DensityState | np.ndarray, W: RadialField,
                       grid: VolumetricGrid) -> float:
    """``(1/2) int int W(x-y) rho(x) rho(y)`` on the volumetric grid."""
    vals = rho.rho if isinstance(rho, DensityState) else np.asarray(rho, dtype=float)
    if W.is_zero:
        return 0.0
    conv, _ = radial_convolution(vals, W, grid, where="centers")
    return 0.5 * float((conv * vals) @ grid.dv)


def volumetric_drift(mu: DensityState | MassProfile | np.ndarray, pot: PotentialSpec,
                     grid: VolumetricGrid, where: str = "edges",
                     point_mass: float = 0.0) -> np.ndarray:
    """Drift operator in volumetric coordinates.

    Returns the v-derivative of the radially evaluated potential
    ``Upsilon[mu](v) = V(r(v)) + (W * mu)(r(v))``, which by the chain rule is
    ``(V'(r) + d/dr (W * mu)(r)) / kappa(v)``.  This is the coefficient the
    mass equation multiplies by ``kappa^2 dM/dv``; at ``v = 0`` the value is
    set to 0 (the bounding sphere degenerates and the no-flux condition kills
    the product with ``kappa^2`` there).

    ``mu`` may be a density state, a mass profile (its slopes are used), or a
    raw per-cell array.
    """
    if isinstance(mu, MassProfile):
        vals = mu.slopes()
    elif isinstance(mu, DensityState):
        vals = mu.rho
    else:
        vals = np.asarray(mu, dtype=float)
    v = grid.v_centers if where == "centers" else grid.v_edges
    r = grid.r_centers if where == "centers" else grid.r_edges
    kap = grid.kappa_centers if where == "centers" else grid.kappa_edges

    dUps_dr = pot.V.deriv(r)
    if not pot.W.is_zero:
        _, dconv = radial_convolution(vals, pot.W, grid, where=where,
                                      point_mass=point_mass)
        dUps_dr = dUps_dr + dconv
    elif point_mass != 0.0:
        dUps_dr = dUps_dr + point_mass * pot.W.deriv(r)

    with np.errstate(divide="ignore", invalid="ignore"):
        drift = np.where(v > 0.0, dUps_dr / np.where(v > 0.0, kap, 1.0), 0.0)
    return drift


def upsilon_values(mu, pot: PotentialSpec, grid: VolumetricGrid,
                   where: str = "centers", point_mass: float = 0.0) -> np.ndarray:
    """Radially evaluated potential ``Upsilon = V + W * mu`` at grid points."""
    if isinstance(mu, MassProfile):
        vals = mu.slopes()
    elif isinstance(mu, DensityState):
        vals = mu.rho
    else:
        vals = np.asarray(mu, dtype=float)
    r = grid.r_centers if where == "centers" else grid.r_edges
    out = pot.V.value(r)
    if not pot.W.is_zero:
        conv, _ = radial_convolution(vals, pot.W, grid, where=where,
                                     point_mass=point_mass)
        out = out + conv
    return out


# ---------------------------------------------------------------------------
# Diffusion nonlinearity: s^m and its uniformly elliptic ladder
# ---------------------------------------------------------------------------

class PowerDiffusion:
    """The exact fast-diffusion nonlinearity ``Phi(s) = s^m``, ``0 < m < 1``.

    ``dphi`` blows up at 0; callers must floor-guard where they genuinely
    need the derivative at vacuum.  ``psi(s) = 2 int_0^s Phi`` and ``g`` with
    ``g'' = 1/Phi'``, ``g(0) = g'(0) = 0`` have closed forms.
    """

    def __init__(self, m: float):
        if not 0.0 < m < 1.0:
            raise ValueError("m must be in (0,1)")
        self.m = m

    @staticmethod
    def _check(s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("Phi is defined for s >= 0")
        return s

    def phi(self, s):
        return self._check(s) ** self.m

    def dphi(self, s):
        s = self._check(s)
        with np.errstate(divide="ignore"):
            return self.m * s ** (self.m - 1.0)

    def psi(self, s):
        s = self._check(s)
        return 2.0 * s ** (self.m + 1.0) / (self.m + 1.0)

    def g(self, s):
        s = self._check(s)
        m = self.m
        return s ** (3.0 - m) / (m * (2.0 - m) * (3.0 - m))

    def entropy_variable(self, s):
        """U'(s) = m/(m-1) s^{m-1}, the (singular-at-0) entropy variable."""
        s = self._check(s)
        m = self.m
        with np.errstate(divide="ignore"):
            return m / (m - 1.0) * s ** (m - 1.0)


def _hermite_coeffs(fa, fpa, fb, fpb, h):
    """Cubic Hermite coefficients in t = (s-a)/h for data (fa, fpa, fb, fpb)."""
    c0 = fa
    c1 = h * fpa
    c2 = -3.0 * fa - 2.0 * h * fpa + 3.0 * fb - h * fpb
    c3 = 2.0 * fa + h * fpa - 2.0 * fb + h * fpb
    return np.array([c0, c1, c2, c3])


class RegularizedDiffusion:
    """Uniformly elliptic regularization ``Phi_k`` of ``s^m``.

    ``Phi_k(0) = 0`` and ``Phi_k'`` takes the constant value ``m k^{1-m}``
    below ``1/k``, equals ``m s^{m-1}`` on ``[1/k, k]`` and the constant
    ``m k^{m-1}`` above ``k``.  The two slope corners are blended by a
    monotone cubic Hermite on ``[sbar(1-delta), sbar(1+delta)]`` with
    ``delta = 1e-3``, integrated in closed form, so ``Phi_k`` is ``C^2``,
    nondecreasing, and ``Phi_k' in [m k^{m-1}, m k^{1-m}]`` exactly.

    Integrating the middle branch from 0 leaves the constant offset
    ``(m-1) k^{-m}`` relative to ``s^m`` there; it vanishes as ``k`` grows,
    giving ``Phi_k -> s^m`` pointwise.
    """

    CORNER_DELTA = 1e-3

    def __init__(self, m: float, k: float):
        if not 0.0 < m < 1.0:
            raise ValueError("m must be in (0,1)")
        if k < 1.0:
            raise ValueError("regularization index k must be >= 1")
        self.m = m
        self.k = float(k)
        d = self.CORNER_DELTA
        self.c_lo = m * self.k ** (1.0 - m)     # slope below 1/k
        self.c_hi = m * self.k ** (m - 1.0)     # slope above k
        sl, sh = 1.0 / self.k, self.k
        self.a0, self.b0 = sl * (1.0 - d), sl * (1.0 + d)
        self.a1, self.b1 = sh * (1.0 - d), sh * (1.0 + d)
        mid = lambda s: m * s ** (m - 1.0)
        midp = lambda s: m * (m - 1.0) * s ** (m - 2.0)
        self._h0 = _hermite_coeffs(self.c_lo, 0.0, mid(self.b0), midp(self.b0),
                                   self.b0 - self.a0)
        self._h1 = _hermite_coeffs(mid(self.a1), midp(self.a1), self.c_hi, 0.0,
                                   self.b1 - self.a1)
        # accumulated antiderivative constants at region boundaries
        self._P_a0 = self.c_lo * self.a0
        self._P_b0 = self._P_a0 + self._window_integral(self._h0, self.b0 - self.a0, 1.0)
        self._P_a1 = self._P_b0 + (self.a1 ** m - self.b0 ** m)
        self._P_b1 = self._P_a1 + self._window_integral(self._h1, self.b1 - self.a1, 1.0)

    @staticmethod
    def _window_eval(coeffs, t):
        return coeffs[0] + t * (coeffs[1] + t * (coeffs[2] + t * coeffs[3]))

    @staticmethod
    def _window_integral(coeffs, h, t):
        return h * t * (coeffs[0] + t * (coeffs[1] / 2.0 + t * (coeffs[2] / 3.0
                                                                + t * coeffs[3] / 4.0)))

    def dphi(self, s):
        scalar = np.isscalar(s) or np.ndim(s) == 0
        s = np.atleast_1d(PowerDiffusion._check(s))
        m = self.m
        out = np.empty_like(s)
        lo = s <= self.a0
        w0 = (s > self.a0) & (s < self.b0)
        mid = (s >= self.b0) & (s <= self.a1)
        w1 = (s > self.a1) & (s < self.b1)
        hi = s >= self.b1
        out[lo] = self.c_lo
        out[w0] = self._window_eval(self._h0, (s[w0] - self.a0) / (self.b0 - self.a0))
        out[mid] = m * s[mid] ** (m - 1.0)
        out[w1] = self._window_eval(self._h1, (s[w1] - self.a1) / (self.b1 - self.a1))
        out[hi] = self.c_hi
        return float(out[0]) if scalar else out

    def phi(self, s):
        scalar = np.isscalar(s) or np.ndim(s) == 0
        s = np.atleast_1d(PowerDiffusion._check(s))
        m = self.m
        out = np.empty_like(s)
        lo = s <= self.a0
        w0 = (s > self.a0) & (s < self.b0)
        mid = (s >= self.b0) & (s <= self.a1)
        w1 = (s > self.a1) & (s < self.b1)
        hi = s >= self.b1
        out[lo] = self.c_lo * s[lo]
        out[w0] = self._P_a0 + self._window_integral(
            self._h0, self.b0 - self.a0, (s[w0] - self.a0) / (self.b0 - self.a0))
        out[mid] = self._P_b0 + (s[mid] ** m - self.b0 ** m)
        out[w1] = self._P_a1 + self._window_integral(
            self._h1, self.b1 - self.a1, (s[w1] - self.a1) / (self.b1 - self.a1))
        out[hi] = self._P_b1 + self.c_hi * (s[hi] - self.b1)
        return float(out[0]) if scalar else out

    def _segments(self):
        return np.array([0.0, self.a0, self.b0, self.a1, self.b1])

    def _integrate(self, f: Callable, s: np.ndarray, order: int = 24) -> np.ndarray:
        """int_0^s f, splitting at the branch points, per-segment GL."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        nodes, weights = _gl_nodes(order)
        brk = self._segments()
        out = np.zeros_like(s)
        for i, si in enumerate(s):
            cuts = np.concatenate((brk[brk < si], [si]))
            cuts = np.concatenate(([0.0], cuts))
            total = 0.0
            for a, b in zip(cuts[:-1], cuts[1:]):
                if b <= a:
                    continue
                x = a + (b - a) * nodes
                total += (b - a) * float(f(x) @ weights)
            out[i] = total
        return out

    def psi(self, s):
        """``2 int_0^s Phi_k``."""
        scalar = np.isscalar(s) or np.ndim(s) == 0
        out = 2.0 * self._integrate(self.phi, np.atleast_1d(s))
        return float(out[0]) if scalar else out

    def g(self, s):
        """g with g'' = 1/Phi_k', g(0) = g'(0) = 0 (double integral)."""
        scalar = np.isscalar(s) or np.ndim(s) == 0
        gprime = lambda x: self._integrate(lambda y: 1.0 / self.dphi(y), x)
        out = self._integrate(gprime, np.atleast_1d(s))
        return float(out[0]) if scalar else out

    def entropy_variable(self, s):
        """Primitive of Phi_k'(s)/s matching m/(m-1) s^{m-1} on the middle branch."""
        scalar = np.isscalar(s) or np.ndim(s) == 0
        s = np.atleast_1d(PowerDiffusion._check(s))
        m = self.m
        anchor = float(np.sqrt(self.b0 * self.a1))  # interior of the middle branch
        base = m / (m - 1.0) * anchor ** (m - 1.0)
        out = np.empty_like(s)
        for i, si in enumerate(s):
            lo, hi = (anchor, si) if si >= anchor else (si, anchor)
            val = self._integrate_between(lambda y: self.dphi(y) / np.maximum(y, 1e-300),
                                          lo, hi)
            out[i] = base + (val if si >= anchor else -val)
        return float(out[0]) if scalar else out

    def _integrate_between(self, f, a, b, order: int = 24):
        nodes, weights = _gl_nodes(order)
        brk = self._segments()
        cuts = np.concatenate(([a], brk[(brk > a) & (brk < b)], [b]))
        total = 0.0
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi <= lo:
                continue
            x = lo + (hi - lo) * nodes
            total += (hi - lo) * float(f(x) @ weights)
        return total


@lru_cache(maxsize=64)
def _ladder(m: float, k: float) -> RegularizedDiffusion:
    return RegularizedDiffusion(m, k)


def diffusion_for(m: float, k_reg: float | None):
    """The nonlinearity a solver should use: exact power or the Phi_k ladder."""
    return PowerDiffusion(m) if k_reg is None else _ladder(m, float(k_reg))


def phi_k(s, k: float, m: float):
    """Regularized diffusion ``Phi_k(s)``; rejects ``s < 0`` and ``k < 1``."""
    return _ladder(m, float(k)).phi(s)


def phi_k_prime(s, k: float, m: float):
    """Derivative ``Phi_k'(s)``, uniformly elliptic in ``[m k^{m-1}, m k^{1-m}]``."""
    return _ladder(m, float(k)).dphi(s)


def psi(s, m: float, k: float | None = None):
    """``Psi(s) = 2 int_0^s Phi``: closed form for ``s^m``, ladder otherwise."""
    if k is None:
        return PowerDiffusion(m).psi(s)
    return _ladder(m, float(k)).psi(s)


def g_phi(s, m: float, k: float | None = None):
    """Auxiliary ``G`` with ``G'' = 1/Phi'`` and ``G(0) = G'(0) = 0``."""
    if k is None:
        return PowerDiffusion(m).g(s)
    return _ladder(m, float(k)).g(s)
