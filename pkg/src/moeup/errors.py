"""Structured errors shared across the package, with CLI exit codes."""

from __future__ import annotations

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_NUMERICAL = 4
EXIT_DIVERGENCE = 5


class MoeupError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MoeupError):
    """Invalid configuration, argument, or precondition violation."""

    exit_code = EXIT_CONFIG


class MissingArtifactError(MoeupError):
    """A required input file (checkpoint, stats, corpus) is absent."""

    exit_code = EXIT_MISSING_ARTIFACT


class NumericalError(MoeupError):
    """Numerical failure in a solver or a non-finite intermediate value."""

    exit_code = EXIT_NUMERICAL


class DimensionMismatchError(NumericalError):
    """Operands have incompatible shapes."""


class NotPositiveDefiniteError(NumericalError):
    """Cholesky factorization failed; carries the 1-based failing pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = pivot
        super().__init__(message or f"matrix not positive definite at pivot {pivot}")


class NonFiniteError(NumericalError):
    """A value that must be finite is NaN or infinite."""


class DivergenceError(MoeupError):
    """Training loss became non-finite; carries the offending step."""

    exit_code = EXIT_DIVERGENCE

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"training diverged at step {step}")


class CheckpointError(MoeupError):
    """Base for checkpoint / container file problems."""

    exit_code = EXIT_MISSING_ARTIFACT


class MagicMismatchError(CheckpointError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(CheckpointError):
    """Recognized container family but unsupported format version."""


class TruncatedFileError(CheckpointError):
    """File ends before the declared header or payload does."""


class ShapeMismatchError(CheckpointError):
    """Stored tensor shapes disagree with the requested configuration."""


class UninitializedRouterError(MoeupError):
    """Learned routing requested on a model whose routers are not set."""

    exit_code = EXIT_CONFIG


class EmptySplitError(MoeupError):
    """A corpus split needed for batching or evaluation has no sequences."""

    exit_code = EXIT_CONFIG
