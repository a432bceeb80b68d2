"""Exception taxonomy shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ConfigurationError(ValueError):
    """A config value or learned-artifact layout is invalid."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class ContractError(RuntimeError):
    """A caller-supplied callable violated a purity/determinism contract."""


class GenerationError(RuntimeError):
    """The synthetic corpus generator could not satisfy its constraints."""


class NumericalError(RuntimeError):
    """A numerical routine left its domain of validity."""


class FormatError(ValueError):
    """A binary file does not match the expected magic/version/layout."""


class StageDependencyError(FileNotFoundError):
    """A pipeline stage was invoked before its upstream stage produced output."""

    def __init__(self, stage: str, path: str):
        super().__init__(f"missing checkpoint for stage '{stage}': {path} "
                         f"(run the '{stage}' stage first)")
        self.stage = stage
