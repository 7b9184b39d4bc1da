"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class VitVizError(Exception):
    exit_code = 5


class UsageError(VitVizError):
    exit_code = 2


class DataError(VitVizError):
    exit_code = 3


class ModelError(VitVizError):
    exit_code = 4


class UnsupportedArchitectureError(ModelError):
    pass


class ModelIntegrityError(ModelError):
    pass


class UnsupportedOperationError(ModelError):
    pass


class LocatorError(IndexError, UsageError):
    """Feature locator or token index outside the model's range."""


class SurgeryPlanError(ValueError, UsageError):
    pass


class ContractError(ValueError, VitVizError):
    """A caller violated an operation precondition."""


class OptimizationError(VitVizError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StoreIntegrityError(DataError):
    pass


class EmptyEvaluationSetError(DataError):
    pass


class UnannotatedImageError(DataError):
    pass
