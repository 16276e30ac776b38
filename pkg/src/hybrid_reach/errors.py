"""Exception hierarchy.

Every error raised on purpose by the package derives from ``DomainError`` so
the CLI can turn it into a machine-readable message and exit code 1.
"""


class DomainError(Exception):
    """Base class for all domain errors raised by hybrid_reach."""

    def to_json(self):
        return {"error": type(self).__name__, "message": str(self)}


# geometry
class EmptyInput(DomainError):
    pass


class AllPointsCoincident(DomainError):
    pass


class DegenerateSimplex(DomainError):
    pass


class UnboundedPolytope(DomainError):
    pass


class DimensionMismatch(DomainError):
    pass


# mesh
class DegenerateProduct(DomainError):
    pass


class PointOutsideCell(DomainError):
    pass


# dynamics
class ExpressionError(DomainError):
    pass


class ParseError(ExpressionError):
    """Syntax error with a 1-based line/column position."""

    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class UnknownIdentifier(ParseError):
    pass


class ArityError(ParseError):
    pass


class EvaluationError(DomainError):
    pass


class NonPhysicalState(EvaluationError):
    pass


# hybridize
class SingularVertexMatrix(DomainError):
    pass


class ZenoBudgetExceeded(DomainError):
    pass


# flow
class PointNotOnCellClosure(DomainError):
    pass


class EventSearchFailed(DomainError):
    pass


# reach
class EmptyTarget(DomainError):
    pass


class NonAdjacentPath(DomainError):
    pass


class TargetNotInFirstMode(DomainError):
    pass


# pmp
class EmptyCandidateSet(DomainError):
    pass


class DegenerateDirection(DomainError):
    pass


class SingularArcDetected(DomainError):
    pass


class GuardGrazing(DomainError):
    pass
