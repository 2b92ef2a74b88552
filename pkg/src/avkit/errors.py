"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class AvkitError(Exception):
    exit_code = 3


class ConfigError(AvkitError, ValueError):
    """Unsupported or inconsistent configuration (bad rate pair, non-NOLA window...)."""

    exit_code = 2


class ContractError(AvkitError, ValueError):
    """Caller violated an operation's precondition (shape mismatch, empty input...)."""

    exit_code = 3


class DataError(AvkitError, ValueError):
    """Malformed file content: parse failures, bad magic, truncation, duplicates."""

    exit_code = 3


class MissingScoreError(ContractError):
    """A trial could not be scored (empty template, failed enrollment, absent system)."""


class NumericalError(AvkitError, ArithmeticError):
    exit_code = 4
