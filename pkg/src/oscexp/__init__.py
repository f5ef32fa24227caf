"""Structure-preserving exponential integrators for charged-particle dynamics
in a strong magnetic field, x'' = (1/eps) B x' + F(x)."""

from .errors import NearSingularCoefficient, NonFinite, StepSizeUnderflow
from .integrators import (
    BASELINE_IDS,
    METHOD_IDS,
    MethodSpec,
    RKTableau,
    StepReport,
    TABLEAUX,
    Trajectory,
    aei_step,
    em1_step,
    integrate,
    make_method,
    reference_solve,
    rk_to_aei,
    step,
)
from .model import (
    CanonicalState,
    Problem,
    State,
    builtin_problem,
    energy,
    exact_linear_solution,
    from_canonical,
    hamiltonian,
    linear_problem,
    to_canonical,
)
from .spectral import PhiTable, SkewSpectrum, matfun, phi_matrix, phi_scalar, skew_spectral

__all__ = [
    "NearSingularCoefficient",
    "NonFinite",
    "StepSizeUnderflow",
    "BASELINE_IDS",
    "METHOD_IDS",
    "MethodSpec",
    "RKTableau",
    "StepReport",
    "TABLEAUX",
    "Trajectory",
    "aei_step",
    "em1_step",
    "integrate",
    "make_method",
    "reference_solve",
    "rk_to_aei",
    "step",
    "CanonicalState",
    "Problem",
    "State",
    "builtin_problem",
    "energy",
    "exact_linear_solution",
    "from_canonical",
    "hamiltonian",
    "linear_problem",
    "to_canonical",
    "PhiTable",
    "SkewSpectrum",
    "matfun",
    "phi_matrix",
    "phi_scalar",
    "skew_spectral",
]

__version__ = "0.1.0"
