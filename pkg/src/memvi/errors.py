class MemviError(ValueError):
    """Base class for library errors."""


class ShapeError(MemviError):
    pass


class EmptyMemoryError(MemviError):
    def __init__(self, msg="empty memory"):
        super().__init__(msg)


class ConfigError(MemviError):
    """Invalid configuration, or an engine/prior/model combination that cannot run."""


class NumericError(ArithmeticError):
    """A loss or state became non-finite."""
