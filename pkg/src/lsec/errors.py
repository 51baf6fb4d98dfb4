"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: usage/config problems are 1, bad input
data is 2, numeric or other runtime failures are 3.
"""


class LsecError(Exception):
    """Base class; `exit_code` drives the CLI process exit status."""

    exit_code = 3


class ConfigError(LsecError):
    """Invalid configuration (bad manifest keys, invariant violations)."""

    exit_code = 1


class ArgumentError(LsecError):
    """An operation was called with an out-of-range argument."""

    exit_code = 1


class ParseError(LsecError):
    """Malformed input file; message carries the offending line number."""

    exit_code = 2


class GraphIndexError(LsecError):
    """An edge endpoint falls outside the declared node counts."""

    exit_code = 2


class ContractError(LsecError):
    """A documented precondition of an operation was violated."""

    exit_code = 2


class ShapeError(LsecError):
    """Matrix dimensions do not conform."""

    exit_code = 3


class AnalysisError(LsecError):
    """An analysis has no eligible sample space (empty cohort/setting)."""

    exit_code = 2


class NumericError(LsecError):
    """NaN or Inf surfaced where finite values are guaranteed."""

    exit_code = 3
