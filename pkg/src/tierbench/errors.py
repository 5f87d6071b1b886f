"""Exception hierarchy shared across the harness."""


class HarnessError(Exception):
    """Base class for every error raised by tierbench."""


class DomainError(HarnessError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(HarnessError):
    """A configuration file or value is missing or malformed."""


class DependencyError(HarnessError):
    """A tier was requested before the tiers it depends on have results."""


class ExecutionError(HarnessError):
    """The agent process could not be started (distinct from a nonzero exit)."""


class SetupError(HarnessError):
    """A workspace could not be prepared."""


class TamperError(HarnessError):
    """The experiment configuration changed since the checkpoint was written."""


class CorruptStateError(HarnessError):
    """A checkpoint file exists but cannot be parsed."""


class VerdictParseError(HarnessError):
    """A judge response did not contain a valid structured verdict."""


class UnscoreableError(HarnessError):
    """Every rubric category was marked not-applicable."""


class JudgeTransportError(HarnessError):
    """A judge backend failed to return a response."""
