"""Exception hierarchy shared across the pipeline.

Every failure the pipeline can produce deliberately maps onto one of three
categories so the CLI can translate it into a stable exit code:

* :class:`ConfigError`    -- bad configuration or arguments (exit code 2)
* :class:`DataError`      -- malformed or insufficient input data (exit code 3)
* :class:`NumericError`   -- numerical failure (non-convergence, rank
  deficiency, ...) (exit code 4)
"""

from __future__ import annotations


class PolarscopeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PolarscopeError):
    """Invalid configuration, CLI arguments, or scenario file."""


class DataError(PolarscopeError):
    """Input data is malformed, inconsistent, or insufficient."""


class NumericError(PolarscopeError):
    """A numerical routine failed (non-convergence, rank deficiency, ...)."""


class RankDeficientError(NumericError):
    """A least-squares design matrix was rank deficient.

    The OLS solver detects rank via QR with column pivoting and refuses to
    silently fall back to a pseudo-inverse; callers that can tolerate a
    deficient design must handle this explicitly.
    """
