"""Exception hierarchy shared across the package.

Each class carries an ``exit_code`` so the command line can map failures to
its 0/1/2 convention without a lookup table.
"""


class SaltError(Exception):
    exit_code = 1


class ConfigError(SaltError, ValueError):
    exit_code = 2


class DimensionError(SaltError, ValueError):
    pass


class ContractError(SaltError, ValueError):
    pass


class DegenerateError(SaltError, ValueError):
    """A batch, mask or matrix has no usable content (empty mask, zero matrix...)."""


class NumericError(SaltError, FloatingPointError):
    pass


class CorruptionError(SaltError, IOError):
    pass


class CheckpointError(CorruptionError):
    """Base for checkpoint failures; subclasses pin distinct codes."""

    code = "ckpt"


class BadMagicError(CheckpointError):
    code = "bad-magic"


class VersionMismatchError(CheckpointError):
    code = "bad-version"


class ShapeMismatchError(CheckpointError):
    code = "shape-mismatch"


class TruncatedError(CheckpointError):
    code = "truncated"
