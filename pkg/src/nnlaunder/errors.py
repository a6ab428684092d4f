class NNLaunderError(Exception):
    pass


class ShapeError(NNLaunderError, ValueError):
    pass


class NonFiniteError(NNLaunderError, FloatingPointError):
    pass


class DivergenceError(NNLaunderError, RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(NNLaunderError, IOError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class IdxFormatError(NNLaunderError, ValueError):
    pass


class ConfigError(NNLaunderError, ValueError):
    pass
