"""Semantic exception hierarchy shared across the package.

The CLI maps these onto exit codes (see cli.EXIT_CODES); library users can
catch the base classes.
"""


class KnnLabError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(KnnLabError):
    """Invalid or inconsistent run configuration (unknown key, bad value)."""


class DataFileError(KnnLabError):
    """A data file is missing, malformed, or truncated."""


class NumericError(KnnLabError):
    """A numeric routine failed to converge or produced a degenerate result."""


class EmptyBallError(NumericError):
    """Both ball-probability estimates vanished; enlarge the radius or sample."""


class DegenerateClassError(KnnLabError):
    """An operation that needs both classes saw only one."""


class InsufficientDataError(KnnLabError):
    """Too few usable rows for the requested fit."""
