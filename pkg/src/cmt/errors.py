"""Exception hierarchy shared by every module."""


class CMTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CMTError, ValueError):
    """Operand extents are incompatible."""


class ConfigError(CMTError, ValueError):
    """A layer or model configuration cannot produce a valid computation."""


class ParameterError(CMTError, ValueError):
    """A parameter value is outside its legal domain."""


class ResolutionError(CMTError, ValueError):
    """Input resolution does not match the relative-position-bias geometry."""


class UnknownVariantError(CMTError, KeyError):
    def __init__(self, name, valid):
        self.name = name
        self.valid = tuple(valid)
        super().__init__(f"unknown variant {name!r}; valid names: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]


class UnknownOpError(CMTError, KeyError):
    def __str__(self):
        return self.args[0]


class DivergenceError(CMTError, RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class SerializationError(CMTError, OSError):
    """Base class for container read/write failures."""


class MagicError(SerializationError):
    pass


class VersionError(SerializationError):
    pass


class TruncatedError(SerializationError):
    pass
