"""Exception types raised across the package."""


class MLRError(Exception):
    pass


class InsufficientData(MLRError):
    """Replay does not hold enough (or suitable) data for the request."""


class InvalidSpec(MLRError, ValueError):
    pass


class ShapeMismatch(MLRError, ValueError):
    pass


class LengthMismatch(MLRError, ValueError):
    pass


class NumericalError(MLRError, ArithmeticError):
    pass


class DegenerateReference(MLRError, ValueError):
    """Human and random reference scores coincide, so HNS is undefined."""


class SteppedDoneEnv(MLRError, RuntimeError):
    pass


class ConfigError(MLRError):
    pass


class UnknownKey(ConfigError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TypeMismatch(ConfigError, TypeError):
    pass


class EmptyLog(MLRError):
    pass
