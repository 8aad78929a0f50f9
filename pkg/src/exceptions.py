class ConfigurationError(ValueError):
    """Raised when a run configuration or a scheme setting is not usable"""


class DomainError(ValueError):
    """Raised when material parameters leave their admissible set"""


class DegenerateInputError(ValueError):
    """Raised when an input field has a zero vector where a direction is needed"""

    def __init__(self, message: str, node: int = None):
        super().__init__(message)
        self.node = node


class ShapeMismatchError(ValueError):
    """Raised when arrays do not live on the expected grid or time grid"""


class InstabilityError(RuntimeError):
    """Raised when time stepping produces non-finite values"""

    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step


class LinearSolveError(RuntimeError):
    """Raised when a sparse factorization or solve fails"""

    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step


class ConvergenceError(RuntimeError):
    """Raised when a pseudo-time relaxation exhausts its step budget"""
