"""Exception hierarchy shared by every bionet module."""


class BioNetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(BioNetError, ValueError):
    """A configuration value is invalid or inconsistent (e.g. channel mismatch)."""


class ShapeError(BioNetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DataError(BioNetError, ValueError):
    """Dataset content is malformed (bad mask values, empty manifest, ...)."""


class DataIOError(BioNetError, OSError):
    """A dataset file could not be read or written."""


class StateError(BioNetError, RuntimeError):
    """An object was used in the wrong state (e.g. backward before forward)."""


class CheckpointError(BioNetError):
    """A checkpoint does not match the network it is loaded into."""


class FormatError(CheckpointError):
    """A checkpoint file is corrupted or not a bionet checkpoint."""


class DivergenceError(BioNetError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
