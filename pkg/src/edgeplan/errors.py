"""Exception hierarchy shared by every edgeplan module."""

from __future__ import annotations


class EdgePlanError(Exception):
    """Base class for all library errors."""


class ScenarioError(EdgePlanError):
    """Scenario or dataset file could not be turned into a valid object."""


class ScenarioFileNotFound(ScenarioError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"scenario file not found: {self.path}")


class ParseError(ScenarioError):
    def __init__(self, line: int, message: str = "invalid syntax"):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(ScenarioError):
    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class AdvisorError(EdgePlanError):
    """Anything that goes wrong while consulting an advisor."""


class AdvisorTimeout(AdvisorError, TimeoutError):
    pass


class TransportError(AdvisorError):
    pass


class MalformedReply(AdvisorError):
    def __init__(self, raw_text: str, reason: str = "no well-formed reply block"):
        self.raw_text = raw_text
        self.reason = reason
        super().__init__(reason)


class InvalidPlan(AdvisorError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


class EmptyDataset(EdgePlanError, ValueError):
    pass


class InvalidSplit(EdgePlanError, ValueError):
    pass


class UnresolvableStep(EdgePlanError):
    pass


class EmptyInput(EdgePlanError, ValueError):
    pass


class UnknownSymbol(EdgePlanError, KeyError):
    pass


class UnknownArch(EdgePlanError, ValueError):
    pass


class ArchMismatch(EdgePlanError, ValueError):
    pass


class InvariantError(EdgePlanError, AssertionError):
    """An internal consistency check failed."""
