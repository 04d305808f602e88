"""Exception types shared across the toolkit.

Every error raised deliberately by qdalign derives from ToolkitError so
callers can catch the whole family at the CLI boundary.  Warnings that
signal suspicious but usable results derive from UserWarning.
"""

from __future__ import annotations

__all__ = [
    "ToolkitError",
    "FormatError",
    "TruncatedFileError",
    "NoFeaturesError",
    "FitError",
    "RankDeficiencyError",
    "DegenerateCrossError",
    "DecodeError",
    "EdgeError",
    "ContractError",
    "UnderdeterminedError",
    "MisidentificationWarning",
]


class ToolkitError(Exception):
    """Base class for all qdalign errors."""


class FormatError(ToolkitError):
    """A file or stream does not follow the documented format."""


class TruncatedFileError(ToolkitError, OSError):
    """A binary payload ended before the declared number of bytes."""


class NoFeaturesError(ToolkitError):
    """An estimator found nothing to work with (flat or featureless input)."""


class FitError(ToolkitError):
    """A least-squares fit failed in a way that invalidates its result."""


class RankDeficiencyError(FitError):
    """Normal equations are singular; one parameter is unconstrained.

    The offending parameter is named so the caller can tell which part of
    the model the data does not constrain.
    """

    def __init__(self, parameter: str, message: str | None = None):
        self.parameter = parameter
        super().__init__(message or f"degenerate parameter: {parameter}")


class DegenerateCrossError(ToolkitError):
    """Too few usable arm sections to define both cross axes."""


class DecodeError(ToolkitError):
    """A binary position label could not be read unambiguously."""


class EdgeError(ToolkitError):
    """A spectral peak sits at the edge of the sampled window."""


class ContractError(ToolkitError):
    """Inputs that must agree (units, orientations, field configs) do not."""


class UnderdeterminedError(ToolkitError):
    """Not enough observations to solve for the requested parameters."""


class MisidentificationWarning(UserWarning):
    """Registration residuals are too large for the claimed marker pairing."""
