"""Exception types shared across the data, training and CLI layers."""


class DataError(Exception):
    """Problems with dataset contents or layout (CLI exit code 2)."""


class LayoutError(DataError):
    pass


class DecodeError(DataError):
    pass


class CapacityError(DataError):
    """Not enough samples to build the requested episode or batch."""


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class CapabilityError(RuntimeError):
    """The model cannot perform the requested operation (e.g. CAM without a feature map)."""
