"""Exception types shared across the package.

Each error carries a short machine-readable ``kind`` and an exit code used by
the command line front-end.
"""


class SiltlabError(Exception):
    kind = "error"
    exit_code = 1


class InvalidConfig(SiltlabError, ValueError):
    kind = "invalid-config"
    exit_code = 3


class BudgetExceeded(SiltlabError):
    kind = "budget-exceeded"
    exit_code = 4


class DimensionTooLow(InvalidConfig):
    kind = "dimension-too-low"


class EmptyInput(InvalidConfig):
    kind = "empty-input"


class SiteNotCovered(SiltlabError, ValueError):
    kind = "site-not-covered"
    exit_code = 5


class ClustersNotTranslates(SiltlabError, ValueError):
    kind = "clusters-not-translates"
    exit_code = 5


class InsufficientData(SiltlabError):
    kind = "insufficient-data"
    exit_code = 6


class MatchingFailure(SiltlabError, RuntimeError):
    """Raised when a perfect matching that must exist was not found."""

    kind = "matching-failure"
    exit_code = 7
