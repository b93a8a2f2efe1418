"""Exception types shared across the package.

The hierarchy mirrors how failures are reported at the command line:
validation problems (bad input, inconsistent dimensions) are distinct from
numerical failures (non-positive widths, singular Gram systems), which are
distinct from comparison-tolerance failures in `diff`.
"""


class GaussResError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GaussResError):
    """Invalid or inconsistent user input (shapes, grammar, config keys)."""


class NumericalError(GaussResError):
    """A numerical procedure failed in a detectable way."""


class WidthCollapseError(NumericalError):
    """The width matrix lost positive definiteness during propagation."""

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class GramSingularError(NumericalError):
    """The Gram system could not be solved even after regularization."""

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class SectorCollapseError(NumericalError):
    """A projected state has zero norm in the requested symmetry sector."""

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class CheckpointError(GaussResError):
    """A requested imaginary time has no stored checkpoint."""


class DiffToleranceError(GaussResError):
    """Column-wise comparison of two result tables exceeded tolerance."""
