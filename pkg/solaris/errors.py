"""Exception hierarchy for the SOLARIS simulator."""

from typing import List, Optional


class SolarisError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(SolarisError, ValueError):
    """Bad argument, shape or value passed to an operation."""


class UnknownIdError(SolarisError, KeyError):
    """A user or item id that does not exist in the world."""

    def __init__(self, kind: str, value: int):
        super().__init__(f"unknown {kind} id {value}")
        self.kind = kind
        self.value = value

    def __str__(self) -> str:
        return self.args[0]


class ConfigError(SolarisError):
    """Experiment configuration could not be read or validated.

    Attributes:
        diagnostics: One human-readable line per problem, already carrying
            the source location when it is known.
    """

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])

    def __str__(self) -> str:
        if not self.diagnostics:
            return self.args[0]
        return self.args[0] + "\n" + "\n".join(f"  {line}" for line in self.diagnostics)
