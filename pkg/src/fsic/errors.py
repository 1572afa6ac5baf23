"""Exception hierarchy shared across the package.

Two broad families matter to callers: validation failures (bad inputs,
bad configs, violated invariants) and runtime/numeric failures. The CLI
and the HTTP service map them to exit code 1 / HTTP 400 and exit code
2 / HTTP 500 respectively.
"""

from __future__ import annotations


class FsicError(Exception):
    """Base class for all package errors."""


class ValidationError(FsicError):
    """Invalid input data, configuration, or a violated invariant."""


class ConfigurationError(ValidationError):
    """A structurally impossible or inconsistent configuration."""


class SamplingError(FsicError):
    """Episode sampling could not satisfy its constraints."""


class NumericError(FsicError):
    """A numeric failure at runtime (non-finite loss, degenerate norm)."""


class CheckpointError(FsicError):
    """A checkpoint file is missing fields or fails to round-trip."""
