"""Passport-layer CNN ownership verification toolkit.

Train CNNs whose scale/shift parameters derive from secret passports, encode
sign signatures into the scale factors, verify ownership through fidelity and
exact signature checks, and mount the standard ambiguity/removal attack suite
against both passport models and watermarking baselines.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    CapacityError,
    ConfigError,
    ContainerFormatError,
    OwnershipFileError,
    PassportNetError,
    PassportShapeError,
    SchemeError,
    TrainingError,
)
