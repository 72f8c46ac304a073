"""Exception types shared across the package."""


class FPClusterError(Exception):
    """Base class for all fpcluster errors."""


class InputError(FPClusterError):
    """Malformed or inconsistent user input."""


class SingularDesignError(FPClusterError):
    """Design matrix is rank deficient; carries the offending column names."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        if message is None:
            message = "singular design; collinear columns: " + ", ".join(map(str, self.columns))
        super().__init__(message)


class SingularHessianError(FPClusterError):
    """Average Hessian not invertible; carries a condition-number diagnostic."""

    def __init__(self, cond):
        self.cond = cond
        super().__init__(f"singular average Hessian (condition number ~ {cond:.3e})")


class SingularAttributesError(FPClusterError):
    """Attribute (projection) Gram matrix is singular."""

    def __init__(self, columns, message=None):
        self.columns = tuple(columns)
        if message is None:
            message = "singular attribute matrix; collinear columns: " + ", ".join(
                map(str, self.columns)
            )
        super().__init__(message)


class SeparationError(FPClusterError):
    """Perfect separation detected while fitting a binary-response model."""


class ConvergenceError(FPClusterError):
    """Iterative fit failed to converge; carries the final gradient norm."""

    def __init__(self, grad_norm, iterations):
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(
            f"no convergence in {iterations} iterations (final gradient norm {grad_norm:.3e})"
        )


class DegenerateDesignError(FPClusterError):
    """No usable variation (e.g. zero within-cluster treatment variance)."""


class MetadataRequiredError(FPClusterError):
    """Population metadata (M, G, H) required but not supplied."""


class EnumerationSizeError(FPClusterError):
    """Exhaustive enumeration requested for a population that is too large."""


class StudyError(FPClusterError):
    """Monte Carlo study failed (too many failed replications)."""
