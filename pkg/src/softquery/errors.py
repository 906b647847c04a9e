"""Exception hierarchy shared by all modules."""


class SoftQueryError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class KGFormatError(SoftQueryError):
    """Malformed knowledge-graph or score file."""

    exit_code = 5

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class QuerySyntaxError(SoftQueryError):
    """DSL text that does not match the grammar."""

    exit_code = 5

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class QueryValidationError(SoftQueryError):
    """Structurally invalid query (undeclared variable, bad alpha/beta, ...)."""

    exit_code = 5


class BudgetExceededError(SoftQueryError):
    """Enumeration would exceed the configured assignment budget."""

    exit_code = 4


class NoCycleError(SoftQueryError):
    """Cycle enumeration was requested on an acyclic graph."""


class NoLeafError(SoftQueryError):
    """Leaf removal was requested on a graph without removable leaves."""


class ConfigError(SoftQueryError):
    """Inconsistent or invalid configuration."""

    exit_code = 2


class DatasetError(SoftQueryError):
    """Dataset construction or loading failed."""

    exit_code = 5
