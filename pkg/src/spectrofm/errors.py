"""Exception types raised across the package."""


class SpectroError(Exception):
    """Base class for package errors."""


class ShapeError(SpectroError, ValueError):
    pass


class InvalidBits(SpectroError, ValueError):
    pass


class AliasError(SpectroError, ValueError):
    """Doppler too large for the sample period (f_D * T_s >= 0.5)."""


class ZeroSignal(SpectroError, ValueError):
    pass


class SignalTooShort(SpectroError, ValueError):
    pass


class ConfigError(SpectroError, ValueError):
    pass


class ShardError(SpectroError, IOError):
    pass


class BadMagic(ShardError):
    pass


class VersionMismatch(ShardError):
    pass


class TruncatedShard(ShardError):
    pass


class NonScalarRoot(SpectroError, ValueError):
    pass


class NonFinite(SpectroError, FloatingPointError):
    pass


class SequenceTooLong(SpectroError, ValueError):
    pass


class DegenerateProjection(SpectroError, ValueError):
    pass


class EmptyMask(SpectroError, ValueError):
    pass


class BatchTooSmall(SpectroError, ValueError):
    pass


class MissingExpertOutput(SpectroError, ValueError):
    pass


class InsufficientSamples(SpectroError, ValueError):
    def __init__(self, label, have: int, need: int):
        super().__init__(f"class {label!r} has {have} samples, need {need}")
        self.label = label
        self.have = have
        self.need = need


class UnbalancedDataset(UserWarning):
    pass
