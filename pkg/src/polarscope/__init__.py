"""Polarization dynamics in retweet event streams.

The library measures how a retweet network's community structure and
per-community toxicity evolve: trailing windows over the event stream are
embedded by a two-stage PCA, users are clustered by embedding direction
(with explicit outliers), per-day dissimilarity and toxicity series are
derived, and lagged dependence between the series is tested with
Granger-style F statistics under a family-wise error correction.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    NumericError,
    PolarscopeError,
    RankDeficientError,
)

__all__ = [
    "__version__",
    "PolarscopeError",
    "ConfigError",
    "DataError",
    "NumericError",
    "RankDeficientError",
]
