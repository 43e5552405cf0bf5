"""Phase retrieval by truncated stochastic amplitude flow.

Two stages: an orthogonality-promoting spectral initialization (solved with
the power method or a variance-reduced stochastic eigen-solver), then
single-equation truncated amplitude-flow refinement with a constant or
Kaczmarz step. Coded-diffraction operators and an experiment harness are
included.
"""
from .core import (
    DataError, DivergenceError, Field, Iterate, MeasurementSet, NumericalError,
    SensingEnsemble, Signal, align_phase, amplitude_loss, dist, gen_gaussian_sensing,
    gen_gaussian_signal, measure, relative_error,
)
from .initialization import (
    EigenReport, InitProblem, VrOpiConfig, apply_Y, default_init_size, eigen_report,
    init_orthogonality_promoting, power_method, scale_estimate, select_index_set, vr_opi,
)
from .refine import (
    SUCCESS_THRESHOLD, RunTrace, Sampling, SolverConfig, StepRule, kaczmarz_step,
    regularity_inner_product, run_staf, sample_index, stochastic_step, taf_full_step,
    truncated_gradient, truncation_indicator,
)

__version__ = "0.1.0"

__all__ = [
    "DataError", "DivergenceError", "Field", "Iterate", "MeasurementSet", "NumericalError",
    "SensingEnsemble", "Signal", "align_phase", "amplitude_loss", "dist",
    "gen_gaussian_sensing", "gen_gaussian_signal", "measure", "relative_error",
    "EigenReport", "InitProblem", "VrOpiConfig", "apply_Y", "default_init_size",
    "eigen_report", "init_orthogonality_promoting", "power_method", "scale_estimate",
    "select_index_set", "vr_opi",
    "SUCCESS_THRESHOLD", "RunTrace", "Sampling", "SolverConfig", "StepRule",
    "kaczmarz_step", "regularity_inner_product", "run_staf", "sample_index",
    "stochastic_step", "taf_full_step", "truncated_gradient", "truncation_indicator",
]
