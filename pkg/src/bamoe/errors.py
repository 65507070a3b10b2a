"""Exception hierarchy shared by every module.

The CLI maps ``ContractError`` subclasses to exit code 2 and
``NumericalError`` subclasses to exit code 3.
"""


class BamoeError(Exception):
    pass


class ContractError(BamoeError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    pass


class ConfigError(ContractError):
    pass


class TagError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class FeasibilityError(ContractError):
    pass


class SizeError(ContractError):
    pass


class ParseError(ContractError):
    pass


class CompatibilityError(ContractError):
    pass


class TapeStateError(ContractError):
    pass


class NumericalError(BamoeError):
    """Non-finite values appeared in a computation."""


class DivergenceError(NumericalError):
    pass
