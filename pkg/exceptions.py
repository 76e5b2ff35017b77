"""
Error hierarchy for Lagrangia
=============================

Every failure the library raises on purpose derives from LagrangiaError, so
the CLI can map it to an exit code and print a single red line instead of a
traceback. Configuration problems also subclass ValueError.
"""

from typing import List, Optional, Sequence


class LagrangiaError(Exception):
    """Base class for all expected failures"""


class ConfigError(LagrangiaError, ValueError):
    """Invalid configuration, arguments or preconditions"""


class DimensionError(ConfigError):
    """Sample or array dimensions do not match the coordinate space"""


class UnknownVariableError(ConfigError):
    """A variable name that is not a coordinate or velocity of the space"""


class SingularConfigurationError(LagrangiaError):
    """Equations of motion hit a coordinate singularity (e.g. sin(theta) = 0)"""

    def __init__(self, message: str, time: Optional[float] = None):
        super().__init__(message)
        self.time = time


class NonFiniteStateError(LagrangiaError):
    """Integration produced NaN or inf"""

    def __init__(self, message: str, time: Optional[float] = None, state=None):
        super().__init__(message)
        self.time = time
        self.state = state


class DegenerateModelError(LagrangiaError):
    """All coefficients are zero, so no acceleration can be predicted"""


class EmptyModelError(LagrangiaError):
    """Hard-thresholding removed every candidate term"""

    def __init__(self, message: str, last_survivors: Sequence[str] = ()):
        super().__init__(message)
        self.last_survivors = list(last_survivors)


class NonFiniteGradientError(LagrangiaError):
    """A cost gradient came back NaN or inf during optimization"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message)
        self.iteration = iteration


class DatasetParseError(LagrangiaError, ValueError):
    """Malformed dataset file"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        location = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


class PriorSelectionError(LagrangiaError):
    """Every prior-term candidate failed to train"""

    def __init__(self, failures: List[tuple]):
        details = "; ".join(f"{key}: {err}" for key, err in failures)
        super().__init__(f"All prior-term candidates failed ({details})")
        self.failures = failures


class NonConvergenceError(LagrangiaError):
    """Training finished without reaching the (relaxed) tolerance"""
