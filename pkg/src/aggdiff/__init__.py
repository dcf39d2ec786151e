"""Numerical laboratory for radial fast-diffusion aggregation equations.

Solves ``d rho/dt = Lap(rho^m) + div(rho grad V) + div(rho grad W*rho)`` with
``0 < m < 1`` on a ball with no-flux boundary, in volumetric coordinates:
a conservative density solver, a monotone solver for the cumulative-mass
equation, free-energy/moment diagnostics, stationary Euler-Lagrange states,
and detection of partial mass concentration into an atom at the origin.
"""

from .config import (
    ConfigError,
    ExperimentConfig,
    InitialCondition,
    build_initial,
    check_hypotheses,
    parse_config,
)
from .density_solver import (
    CFLError,
    NewtonError,
    PicardError,
    SolverConfig,
    SolverError,
    Trajectory,
    l1_contraction_gap,
    picard_drift_fixed_point,
    solve_density,
    step_frozen_drift,
)
from .energetics import (
    EnergyRecord,
    MomentRecord,
    dissipation,
    free_energy,
    moment_bound_check,
    moments,
    w11_equicontinuity,
)
from .mass_solver import (
    ConcentrationReport,
    MassSolverConfig,
    MassTrajectory,
    MonotonicityError,
    check_viscosity_inequalities,
    detect_concentration,
    holder_regularity_probe,
    solve_mass,
    step_mass,
)
from .model import (
    CompactBumpField,
    DensityState,
    MassProfile,
    ModelParams,
    PotentialSpec,
    PowerDiffusion,
    PowerField,
    QuadraticField,
    RegularizedDiffusion,
    SumField,
    VolumetricGrid,
    ZeroField,
    g_phi,
    kappa,
    phi_k,
    phi_k_prime,
    psi,
    radial_convolution,
    unit_ball_volume,
    volumetric_drift,
)
from .runner import RunManifest, convergence_study, run
from .stationary_solver import (
    InfeasibleH,
    StationaryState,
    flux_sign_probe,
    quadratic_W_reduction,
    solve_stationary,
    stationary_profile_given_h,
)

__version__ = "0.1.0"
