"""Exception hierarchy shared by every metaseg module."""


class MetasegError(Exception):
    """Base class for all errors raised by metaseg."""


class SizeError(MetasegError, ValueError):
    """Array extents do not match what an operation requires."""


class ShapeError(MetasegError, ValueError):
    """A tensor has the wrong rank or is not a scalar where one is needed."""


class NumericError(MetasegError, ArithmeticError):
    """A NaN or Inf showed up at an op boundary or in a training loop."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(MetasegError, ValueError):
    pass


class BoxError(MetasegError, ValueError):
    pass


class StructureError(MetasegError, ValueError):
    """Parameter, gradient and learning-rate trees are not isomorphic."""


class FormatError(MetasegError, ValueError):
    """A checkpoint file is corrupt, truncated or from another version."""


class SequenceError(MetasegError, ValueError):
    pass


class EvalError(MetasegError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""
