"""Exception hierarchy shared by every rdoe module."""


class RdoeError(Exception):
    """Base class for all library errors."""


class SingularModelPoint(RdoeError, ValueError):
    """Model evaluated where its closed form is undefined."""


class SingularFim(RdoeError, ValueError):
    """Fisher information matrix is not invertible."""


class DomainError(RdoeError, ValueError):
    """Argument outside the mathematical domain of a function."""


class AllStartsFailed(RdoeError, RuntimeError):
    """Every multi-start run ended with a non-finite objective."""


class UnderdeterminedData(RdoeError, ValueError):
    """Fewer scalar measurements than parameters to estimate."""


class InconsistentTree(RdoeError, ValueError):
    """Scenario-tree weights or parent links violate the tree rules."""


class ConfigError(RdoeError, ValueError):
    """Invalid run configuration."""
