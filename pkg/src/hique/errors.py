"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: :class:`DataValidationError` -> 3,
:class:`HiqueRuntimeError` (and subclasses) -> 4.
"""


class DataValidationError(ValueError):
    """Input data does not satisfy a documented contract."""


class TaxonomyError(DataValidationError):
    pass


class TranscriptError(DataValidationError):
    pass


class HiqueRuntimeError(RuntimeError):
    pass


class AdapterConfigurationError(HiqueRuntimeError):
    """An external feature extractor or encoder is missing or misconfigured."""


class DivergenceError(HiqueRuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
