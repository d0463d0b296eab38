class ContractViolation(ValueError):
    """An operation was called with arguments outside its precondition."""


class CorruptStreamError(ValueError):
    """A sparse gradient record is malformed (bad index, duplicate, short)."""


class ConfigError(ValueError):
    """Invalid engine, topology or experiment configuration."""


class UnsupportedOperation(RuntimeError):
    """Operation not available on this device kind (e.g. P2P on a plain SSD)."""


class CapacityError(RuntimeError):
    """A write or allocation exceeds the device's capacity."""


class SkippedStep(ArithmeticError):
    """The update was refused because the gradients are not finite."""
