"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries its code.
"""


class BENetError(Exception):
    exit_code = 1


class ConfigError(BENetError, ValueError):
    """Invalid configuration value or unknown key."""

    exit_code = 2


class InputError(BENetError, ValueError):
    """Input data rejected (bad shape, empty batch, out-of-range values)."""

    exit_code = 2


class UndefinedMetricError(InputError):
    """Metric is undefined for the given labels (e.g. a single class)."""


class NumericalError(BENetError, ArithmeticError):
    """Non-finite parameters or activations."""

    exit_code = 4


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""


class StateError(BENetError, RuntimeError):
    """Object used in the wrong lifecycle state (e.g. uncalibrated detector)."""

    exit_code = 2


class InvariantError(BENetError, AssertionError):
    """Internal invariant violated."""


class DataIOError(BENetError, OSError):
    """Missing or unreadable files."""

    exit_code = 3


class CorruptionError(DataIOError):
    """Dataset on disk is inconsistent with its index."""


class CheckpointError(BENetError):
    """Checkpoint missing pieces or failing to load."""

    exit_code = 5
