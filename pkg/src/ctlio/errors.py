"""Exception types raised across the package."""


class CtlioError(Exception):
    """Base class for all package errors."""


class ContractViolation(CtlioError, ValueError):
    """An operation was called outside its documented preconditions."""


class StreamOrderError(CtlioError):
    """Sensor samples arrived with non-increasing timestamps."""


class RejectedSampleError(CtlioError):
    """A sensor sample contained non-finite values."""


class InsufficientImuError(CtlioError):
    """IMU data does not cover the requested time span."""

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class OutOfRangeError(CtlioError):
    """A trajectory was queried outside its knot span."""

    def __init__(self, message, point_index=None):
        super().__init__(message)
        self.point_index = point_index


class DegenerateCloudError(CtlioError):
    """Too few points to estimate local structure."""


class InsufficientCorrespondenceError(CtlioError):
    """Registration found fewer correspondences than the configured floor."""

    def __init__(self, message, count):
        super().__init__(message)
        self.count = count


class OptimizationFailedError(CtlioError):
    """Pose graph optimization diverged."""


class EmptyScanError(CtlioError):
    """A simulated scan produced no returns."""


class ParseError(CtlioError):
    """A log or trajectory file is malformed."""

    def __init__(self, message, offset=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class InsufficientOverlapError(CtlioError):
    """Too few timestamp associations between two trajectories."""


class ConfigError(CtlioError):
    """Invalid or unknown configuration values."""


class PipelineError(CtlioError):
    """A pipeline stage failed for a particular scan."""

    def __init__(self, message, scan_index=None, stage=None):
        super().__init__(message)
        self.scan_index = scan_index
        self.stage = stage
