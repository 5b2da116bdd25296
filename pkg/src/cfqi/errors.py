"""Exception types shared across the package."""


class CfqiError(Exception):
    """Base class for package errors."""


class ConfigError(CfqiError):
    """Invalid configuration value. Carries the dotted field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config error at {field}: {message}")


class ParseError(CfqiError):
    """Malformed dataset file. Carries the offending line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"dataset parse error at line {line_no}: {message}")


class CompatibilityError(CfqiError):
    """Artifact and config disagree on environment structure."""


class CoverageError(CfqiError):
    """A censoring-depth bucket required by training is empty."""

    def __init__(self, depth: int, message: str):
        self.depth = depth
        super().__init__(message)


class ConsistencyError(CfqiError):
    """Data contradicts a structural invariant (e.g. depth exceeds n_hat)."""


class DegenerateTailError(CfqiError):
    """Survival mass at the censoring point is below the usable floor."""
