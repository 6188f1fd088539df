class ContractError(ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ContractError):
    pass


class NumericalError(ArithmeticError):
    """A kernel produced NaN or Inf."""


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
