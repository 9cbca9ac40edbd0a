"""Exception hierarchy shared across the package."""

from __future__ import annotations


class OdeScoutError(Exception):
    """Base class for all package errors."""


# expression parsing / skeletons
class ParseError(OdeScoutError, ValueError):
    pass


class UnknownSymbol(ParseError):
    pass


class VariableOutOfRange(ParseError):
    pass


class ForbiddenPlaceholder(ParseError):
    pass


class TermCapExceeded(OdeScoutError, ValueError):
    pass


class ParamLengthMismatch(OdeScoutError, ValueError):
    pass


# benchmarks
class UnknownSystem(OdeScoutError, KeyError):
    pass


class NonFiniteState(OdeScoutError, ArithmeticError):
    """Raised when a fixed-step integration leaves the finite range."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class TooFewPoints(OdeScoutError, ValueError):
    pass


# optimization
class DimensionOutOfRange(OdeScoutError, IndexError):
    pass


class AllStrategiesFailed(OdeScoutError, RuntimeError):
    pass


# agents
class MalformedResponse(OdeScoutError, ValueError):
    pass


class TransportError(OdeScoutError, ConnectionError):
    pass


class BudgetExceeded(OdeScoutError, RuntimeError):
    pass


class ScriptExhausted(OdeScoutError, RuntimeError):
    pass


# search loop
class NoValidHypothesis(OdeScoutError, RuntimeError):
    pass


class ConfigError(OdeScoutError, ValueError):
    pass
