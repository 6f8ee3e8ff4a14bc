class StiltError(Exception):
    """Base class for every error raised by stilt_bench."""

    code = "error"


class DimensionError(StiltError, ValueError):
    code = "dimension"


class ConfigError(StiltError, ValueError):
    code = "config"


class BatchSizeError(StiltError, ValueError):
    code = "batch_size"


class EvaluationError(StiltError, ArithmeticError):
    code = "evaluation"


class ContractError(StiltError, RuntimeError):
    code = "contract"


class DatasetError(StiltError, ValueError):
    code = "dataset"


class DegenerateInputError(StiltError, ValueError):
    code = "degenerate"


class TrainingDivergedError(StiltError, ArithmeticError):
    code = "diverged"


class ReportError(StiltError, RuntimeError):
    code = "report"
