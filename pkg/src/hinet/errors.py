"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """NaN/inf or an out-of-domain value (e.g. log of a non-positive)."""


class ContractError(RuntimeError):
    """A call violated a precondition that is not about shapes or numbers."""


class ConfigError(ValueError):
    """A model, generator or experiment configuration is invalid."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""


class DatasetFormatError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CheckpointError(IOError):
    """A parameter bundle or checkpoint could not be read."""


class TrainingError(RuntimeError):
    pass
