class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class NumericError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"{message} (sample {index})")
