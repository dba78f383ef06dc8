"""Exception types raised across the package."""

from .tensor import NumericError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ContractError(RuntimeError):
    """A caller violated an operation's preconditions."""


class CheckpointError(IOError):
    """A checkpoint could not be written or read back."""


class ImageFileError(IOError):
    """A PPM/PGM file is malformed or inconsistent with its directory."""


__all__ = ["ConfigError", "ContractError", "CheckpointError", "ImageFileError", "NumericError"]
