"""Exception hierarchy shared by all modules.

Every error carries an ``exit_code`` so the CLI can map failures to the
documented process exit status without string matching.
"""

from __future__ import annotations


class BlowupError(Exception):
    """Base class for all library errors."""

    exit_code = 2


# -- evaluation / vector fields ------------------------------------------------

class DomainError(BlowupError):
    """A point lies outside the natural domain of an expression."""


class DivisionNearZero(DomainError):
    pass


class NegativeBaseRealPower(DomainError):
    pass


class NotMonomialSum(BlowupError):
    pass


class WeightTooHigh(BlowupError):
    pass


class CertificateFailure(BlowupError):
    pass


# -- parsing --------------------------------------------------------------------

class ParseError(BlowupError):
    """Base class for problem-file and expression errors."""

    def in_context(self, where: str) -> "ParseError":
        return type(self)(f"{where}: {self}")


class ExprSyntaxError(ParseError):
    def __init__(self, message: str, position: int, expected: list[str] | None = None):
        self.message = message
        self.position = position
        self.expected = list(expected or [])
        detail = f"{message} at position {position}"
        if self.expected:
            detail += f" (expected {' or '.join(self.expected)})"
        super().__init__(detail)

    def in_context(self, where: str) -> "ExprSyntaxError":
        return ExprSyntaxError(f"{where}: {self.message}", self.position, self.expected)


class UnknownIdentifier(ParseError):
    pass


class NonLiteralExponent(ParseError):
    pass


class MissingSection(ParseError):
    pass


class DimensionMismatch(ParseError):
    pass


# -- series algebra ---------------------------------------------------------------

class LeadingTermNotInvertible(BlowupError):
    pass


class NonPositiveLeadingCoefficient(BlowupError):
    pass


class UnboundParameter(BlowupError):
    pass


class UnboundedTruncation(BlowupError):
    """An infinite expansion was requested from an exact series without a cap."""


# -- spectral -----------------------------------------------------------------------

class NoRootFound(BlowupError):
    pass


class JacobianSingularAtIterate(BlowupError):
    pass


class IllConditionedJordan(BlowupError):
    pass


class ResidualNotSeriesRepresentable(BlowupError):
    pass


# -- expansion ------------------------------------------------------------------------

class ComplexSpectrumUnsupported(BlowupError):
    exit_code = 3


class NonHyperbolic(BlowupError):
    exit_code = 4


class ResonanceToleranceAmbiguous(BlowupError):
    def __init__(self, message: str, candidates=None):
        self.candidates = candidates
        super().__init__(message)


class OrderTooDeepForTruncation(BlowupError):
    pass


# -- validation ------------------------------------------------------------------------

class IntegratorStepFailure(BlowupError):
    exit_code = 5


class DegenerateFit(BlowupError):
    exit_code = 5


class UnstableTakeoverImmediate(BlowupError):
    pass


class ValidationFailure(BlowupError):
    exit_code = 5
