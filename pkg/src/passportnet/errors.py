"""Exception hierarchy shared across the package."""


class PassportNetError(Exception):
    """Base class for all package errors."""


class ConfigError(PassportNetError):
    """Invalid configuration: unknown architecture, bad layer id, missing artifact."""


class PassportShapeError(PassportNetError):
    """Passport tensor is not shape-compatible with its host convolution."""


class SchemeError(PassportNetError):
    """Operation not defined for the model's verification scheme."""


class CapacityError(PassportNetError):
    """Signature payload exceeds the model's sign capacity."""


class ContainerFormatError(PassportNetError):
    """Container file is corrupt or not a container at all."""


class OwnershipFileError(PassportNetError):
    """Container belongs to a different model (fingerprint mismatch)."""


class TrainingError(PassportNetError):
    """Training diverged or could not complete."""
