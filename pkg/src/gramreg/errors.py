"""Exception hierarchy shared by all modules."""


class GramRegError(Exception):
    pass


class DimensionError(GramRegError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(GramRegError, ValueError):
    """Argument outside the operation's domain (empty axis, bad label, ...)."""


class FormatError(GramRegError):
    """A dataset, checkpoint or config file is malformed."""


class ConfigError(GramRegError, ValueError):
    pass


class StateError(GramRegError, RuntimeError):
    pass


class TrainingError(GramRegError, RuntimeError):
    """Non-finite gradient or loss during training."""

    def __init__(self, message, epoch=None, layer=None):
        super().__init__(message)
        self.epoch = epoch
        self.layer = layer
