"""Exception hierarchy shared by the library and the CLI."""


class SpatialCvMError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class InvalidArgumentError(SpatialCvMError, ValueError):
    exit_code = 2


class ConfigError(SpatialCvMError):
    exit_code = 2


class InvalidDataError(SpatialCvMError, ValueError):
    exit_code = 3


class DegenerateBandwidthError(SpatialCvMError):
    pass


class UnsupportedDimensionError(InvalidArgumentError):
    pass


class CalibrationFailedError(SpatialCvMError):
    pass


class DegenerateCalibrationError(SpatialCvMError):
    pass


class CalibrationMismatchError(SpatialCvMError):
    """Raised when a calibration does not describe the dataset under test."""

    exit_code = 3

    def __init__(self, fields):
        self.fields = dict(fields)
        desc = ", ".join(f"{k}: calibration={a!r} data={b!r}" for k, (a, b) in self.fields.items())
        super().__init__(f"calibration does not match data ({desc})")


class SingularDesignError(SpatialCvMError):
    pass


class SimulationSetupError(SpatialCvMError):
    pass
