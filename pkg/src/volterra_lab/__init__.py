"""Volterra Gaussian processes: kernels, covariance, simulation, local times,
self-intersection local times and small-time asymptotics."""

__version__ = "0.1.0"

from .hilbert import GridFunction, TimeGrid, gram, gram_schmidt, inner_product, project
from .kernels import KernelSpec, eval_kernel, kernel_from_config, validate_kernel
from .covariance import cov_matrix, integrator_constant, lnd_diagnostics, pair_stats, rudenko_integral
from .rng import Seed
from .simulate import sample_exact, sample_planar, sample_volterra
from .localtime import expected_local_time, kernel_continuity_experiment, l2_moment_formula, mollified_local_time
from .silt import expected_silt2, fw_transform_mc, regularized_fw_integral, silt_plain, silt_rosen
from .asymptotics import h_envelope, lil_ratios, tail_decay_check

__all__ = [
    "GridFunction", "TimeGrid", "gram", "gram_schmidt", "inner_product", "project",
    "KernelSpec", "eval_kernel", "kernel_from_config", "validate_kernel",
    "cov_matrix", "integrator_constant", "lnd_diagnostics", "pair_stats", "rudenko_integral",
    "Seed", "sample_exact", "sample_planar", "sample_volterra",
    "expected_local_time", "kernel_continuity_experiment", "l2_moment_formula", "mollified_local_time",
    "expected_silt2", "fw_transform_mc", "regularized_fw_integral", "silt_plain", "silt_rosen",
    "h_envelope", "lil_ratios", "tail_decay_check",
]
