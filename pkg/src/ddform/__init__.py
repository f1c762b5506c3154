"""Numerical construction and asymptotic analysis of distinguished solutions
of second-order elliptic equations in double divergence form."""

__version__ = "0.1.0"

from .modulus import (  # noqa: F401
    ModulusOmega,
    OmegaReport,
    check_conditions,
    dini_integral,
    log_modulus,
    power_modulus,
    zero_modulus,
)
from .coeff import (  # noqa: F401
    CoefficientField,
    angular_field,
    equivariant_field,
    g_field,
    identity_field,
    k_field,
)
from .grids import AnnularField, RadialGrid, RadialProfile, SphereRule  # noqa: F401
from .solver import SolutionBundle, SolverConfig, construct_solution  # noqa: F401
