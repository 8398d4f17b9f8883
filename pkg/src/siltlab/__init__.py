"""siltlab: simulation and verification tools for self-intersection local
times of lazy symmetric random walks on Z^d."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BudgetExceeded,
    ClustersNotTranslates,
    DimensionTooLow,
    EmptyInput,
    InsufficientData,
    InvalidConfig,
    MatchingFailure,
    SiltlabError,
    SiteNotCovered,
)
