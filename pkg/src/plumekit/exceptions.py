"""Exception types shared across plumekit."""


class PlumekitError(Exception):
    """Base class for all plumekit errors."""


class DomainError(PlumekitError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class GridCoverageError(PlumekitError, ValueError):
    """A spectral response function extends beyond the wavelength grid."""


class ConfigError(PlumekitError, ValueError):
    """Invalid run or simulation configuration."""


class LoadError(PlumekitError, IOError):
    """A file could not be read or failed validation."""


class NoBackgroundError(PlumekitError, ValueError):
    """No clean background pixels are available for a spectral fit."""
