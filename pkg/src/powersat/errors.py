"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: usage/input problems exit 2, provider
problems exit 3, numerical failures exit 4.
"""


class PowersatError(Exception):
    """Base class for all pipeline errors."""


class CatalogError(PowersatError):
    """Site catalog is missing, malformed, or contains invalid rows."""


class MissingBandError(PowersatError):
    """A raster lacks one of the required spectral bands."""


class CropError(PowersatError):
    """A patch window cannot be extracted (out of bounds, no-data, ...)."""


class SamplingError(PowersatError):
    """Background sampling could not place the requested windows."""


class PatchFormatError(PowersatError):
    """A patch container file is corrupt or has an unexpected layout."""


class ProviderError(PowersatError):
    """A raster provider is unreachable or returned an invalid response."""


class ConfigError(PowersatError):
    """A configuration file or value is invalid."""


class SpecMismatchError(PowersatError):
    """Checkpoint or transfer source is incompatible with the target spec."""


class NonFiniteLossError(PowersatError):
    """Training hit a NaN/Inf loss; carries epoch/batch/lr diagnostics."""

    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr:g}"
        )
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
