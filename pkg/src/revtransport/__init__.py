"""Reflection coupling with a shifted Girsanov interpolation for overdamped
Langevin dynamics: closed-form KL/Renyi bounds and their Monte Carlo checks."""

from .coupling import CouplingState, CutoffPair, SimConfig, TrajectoryStats, simulate, step
from .divergence import dv_duality_check, harnack_check, kl_girsanov_estimate, renyi_girsanov_estimate
from .lyapunov import LyapunovF, f_deriv, f_eval
from .potential import Certificate, PotentialSpec, double_well, grad, quadratic, verify_certificate
from .schedule import ScheduleParams, envelope, eta_bar, kl_bound, make_schedule, moment_integral, renyi_bound

__version__ = "0.1.0"

__all__ = [
    "Certificate",
    "CouplingState",
    "CutoffPair",
    "LyapunovF",
    "PotentialSpec",
    "ScheduleParams",
    "SimConfig",
    "TrajectoryStats",
    "double_well",
    "dv_duality_check",
    "envelope",
    "eta_bar",
    "f_deriv",
    "f_eval",
    "grad",
    "harnack_check",
    "kl_bound",
    "kl_girsanov_estimate",
    "make_schedule",
    "moment_integral",
    "quadratic",
    "renyi_bound",
    "renyi_girsanov_estimate",
    "simulate",
    "step",
    "verify_certificate",
]
