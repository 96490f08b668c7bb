"""Exception hierarchy shared by every vitdd module."""


class VitddError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(VitddError, ValueError):
    pass


class LabelError(VitddError, ValueError):
    pass


class ConfigError(VitddError, ValueError):
    pass


class ContractError(VitddError, RuntimeError):
    pass


class NumericError(VitddError, ArithmeticError):
    pass


class DataError(VitddError, OSError):
    pass


class FormatError(DataError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(VitddError, RuntimeError):
    pass


class DetectorContractError(VitddError, ValueError):
    pass
