"""Finite-element reduction of  -div(A grad u + u B) + C . grad u + d u  on planar disks
to a pure divergence operator and then to a Beltrami system, plus experiments
probing unique continuation of the discrete solutions."""
from .beltrami import (BeltramiData, beltrami_data, beltrami_residual, cauchy_transform, dilatations,
                       lower_order_coefficients, similarity_factor, stream_function, wirtinger)
from .fields import BUILTIN_NAMES, CoefficientSet, NonEllipticError, builtin, check_ellipticity
from .lab import ExperimentConfig, InvalidConfig, NormProfile, run
from .mesh import FemFunction, Mesh, build_disk_mesh, integrate, lp_norm, quadrature
from .operators import assemble, contraction_iterate, estimate_contraction_norm, solve_dirichlet
from .reduction import ReductionParameters, ReductionResult, reduce, solve_reduced, verify_factorization

__version__ = "0.1.0"

__all__ = [
    "BeltramiData", "beltrami_data", "beltrami_residual", "cauchy_transform", "dilatations",
    "lower_order_coefficients", "similarity_factor", "stream_function", "wirtinger",
    "BUILTIN_NAMES", "CoefficientSet", "NonEllipticError", "builtin", "check_ellipticity",
    "ExperimentConfig", "InvalidConfig", "NormProfile", "run",
    "FemFunction", "Mesh", "build_disk_mesh", "integrate", "lp_norm", "quadrature",
    "assemble", "contraction_iterate", "estimate_contraction_norm", "solve_dirichlet",
    "ReductionParameters", "ReductionResult", "reduce", "solve_reduced", "verify_factorization",
]
