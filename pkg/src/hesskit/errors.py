"""Exception hierarchy shared across the toolkit."""


class HesskitError(Exception):
    """Base class for all toolkit errors."""


# autodiff
class ShapeMismatch(HesskitError, ValueError):
    pass


class UnknownPrimitive(HesskitError, KeyError):
    pass


class DetachedLoss(HesskitError, RuntimeError):
    pass


class NonScalarLoss(HesskitError, ValueError):
    pass


class NonFiniteGradient(HesskitError, FloatingPointError):
    pass


# models / training
class InvalidSpec(HesskitError, ValueError):
    pass


class DivergedLoss(HesskitError, FloatingPointError):
    pass


class CorruptCheckpoint(HesskitError, ValueError):
    pass


# hutchinson
class NonFiniteHvp(NonFiniteGradient):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


# pruner
class ChannelSetMismatch(HesskitError, ValueError):
    pass


class InfeasibleTarget(HesskitError, ValueError):
    pass


class StructuralViolation(HesskitError, ValueError):
    pass


class TooLarge(HesskitError, ValueError):
    pass


class SingularBlock(HesskitError, ArithmeticError):
    pass


# quant
class CorruptQuantFile(HesskitError, ValueError):
    pass


# pipeline
class ConfigInvalid(HesskitError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnknownCommand(HesskitError, ValueError):
    pass


class CorruptDataset(HesskitError, ValueError):
    pass


class UnsupportedFormat(HesskitError, ValueError):
    pass


class MissingArtifact(HesskitError, FileNotFoundError):
    pass
