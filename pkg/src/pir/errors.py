"""Exception types shared across the package.

CLI exit codes are attached to the classes that map onto them.
"""


class PirError(Exception):
    exit_code = 1


class ShapeError(PirError, ValueError):
    """Operand extents do not satisfy an operation's contract."""


class DegenerateRowError(PirError, ValueError):
    """A softmax row has every entry masked with -inf."""


class AlignmentError(PirError, ValueError):
    """Encoder and decoder sequence lengths differ where 1:1 alignment is required."""


class BehindCameraError(PirError, ValueError):
    """A projected point has non-positive camera-space depth."""


class ConfigError(PirError, ValueError):
    exit_code = 2


class MissingArtifactError(PirError, FileNotFoundError):
    exit_code = 3


class NumericError(PirError, FloatingPointError):
    exit_code = 4
