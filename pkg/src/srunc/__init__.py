"""Uncertainty-aware GAN super-resolution (SRGAN / ESRGAN with MC-Dropout and Deep Ensembles)."""

__version__ = "0.1.0"


class SRUncError(Exception):
    """Base class for package errors."""


class ConfigError(SRUncError, ValueError):
    pass


class ShapeError(SRUncError, ValueError):
    pass


class DomainError(SRUncError, ValueError):
    pass


class ImageFormatError(SRUncError, ValueError):
    pass
