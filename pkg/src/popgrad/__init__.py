"""Exact population-loss gradient dynamics for ReLU students learning a single ReLU teacher."""
from .diagnostics import (
    CheckResult,
    DiagnosticsReport,
    PhaseThresholds,
    RateFit,
    check_init,
    estimate_rate,
    fit_lower_bound,
    phase_detect,
    run_checkers,
)
from .dynamics import InitSpec, RunConfig, Trajectory, gd_step, init_random, make_toycase, run, run_flow, run_gd
from .errors import PopgradError
from .geometry import GeometryView, Teacher, geometry_view
from .objective import gradient, hessian, loss, loss_and_gradient
from .sampling import mc_gradient, mc_loss

__version__ = "0.1.0"

__all__ = [
    "CheckResult", "DiagnosticsReport", "PhaseThresholds", "RateFit", "check_init", "estimate_rate",
    "fit_lower_bound", "phase_detect", "run_checkers", "InitSpec", "RunConfig", "Trajectory", "gd_step",
    "init_random", "make_toycase", "run", "run_flow", "run_gd", "PopgradError", "GeometryView", "Teacher",
    "geometry_view", "gradient", "hessian", "loss", "loss_and_gradient", "mc_gradient", "mc_loss",
]
