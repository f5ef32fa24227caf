"""Exception types shared across the package."""


class NearSingularCoefficient(ArithmeticError):
    """A reciprocal coefficient function vanishes at an eigenvalue of h*Omega.

    Raised when (h/eps) * omega lands on a step-size resonance, e.g. when
    phi_1(-h*Omega) is singular for M2.
    """

    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class NonFinite(FloatingPointError):
    """A step produced NaN or inf.

    ``partial`` holds the trajectory recorded up to the failing step when the
    error is raised from :func:`oscexp.integrators.integrate`.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class StepSizeUnderflow(RuntimeError):
    """The adaptive reference solver could not meet its tolerance."""
