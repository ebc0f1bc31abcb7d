"""Tychastic (unscented) trajectory optimization.

Replace an uncertain parameter by a small set of sigma points, copy the
dynamics once per point under a single shared control, transcribe the
ensemble by direct collocation and solve the resulting nonlinear program;
then check the control by Monte Carlo.
"""
from .dynamics import ControlSolution, hst_field, propagate_rk45, zermelo_field
from .problems import builtin_problem
from .transcription import extract_control, solve_ocp, transcribe
from .uncertainty import GaussianSpec, sigma_points
from .verification import feasibility_check, monte_carlo, risk_curve

__version__ = "0.1.0"

__all__ = ["ControlSolution", "GaussianSpec", "builtin_problem", "extract_control",
           "feasibility_check", "hst_field", "monte_carlo", "propagate_rk45", "risk_curve",
           "sigma_points", "solve_ocp", "transcribe", "zermelo_field"]
