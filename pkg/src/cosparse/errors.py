"""Exception hierarchy shared across the package.

``ValidationError`` subclasses indicate unusable inputs (bad shapes,
malformed files, unsatisfiable requests); ``NumericalError`` subclasses
indicate failures of the numerical procedures themselves. The command line
maps the two families to distinct exit codes.
"""


class CosparseError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(CosparseError):
    """Input violates a documented precondition."""


class NumericalError(CosparseError):
    """A numerical procedure failed or left its domain."""


class DimensionMismatch(ValidationError):
    """Array shapes are inconsistent with each other or with an operator."""


class DegenerateColumn(ValidationError):
    """A vector collapses to (numerical) zero after mean removal."""


class InsufficientSamples(ValidationError):
    """Fewer patch positions survive filtering than were requested."""


class TooSmall(ValidationError):
    """An image is too small for the requested multi-scale processing."""


class MalformedFile(ValidationError):
    """An image or container file does not follow its format."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ZeroDenominator(NumericalError):
    """A conjugation-parameter denominator vanished; restart with steepest descent."""


class LineSearchFailure(NumericalError):
    """Armijo backtracking shrank below the representable step floor."""


class RankDeficient(NumericalError):
    """An operator restricted to the zero-sum subspace lost full rank."""


class CoincidentRows(NumericalError):
    """Two operator rows are (anti)parallel; the coherence barrier diverges."""


class NonFiniteObjective(NumericalError):
    """An objective evaluated to NaN or infinity at an accepted point."""


class NonFiniteGradient(NumericalError):
    """A gradient evaluated to NaN or infinity."""
