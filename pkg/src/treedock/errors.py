"""Exception hierarchy shared by every treedock module."""


class TreedockError(Exception):
    """Base class for all library errors."""


class DegenerateInput(TreedockError, ValueError):
    pass


class InvalidSequence(TreedockError, ValueError):
    pass


class GenerationFailed(TreedockError, RuntimeError):
    pass


class ParseError(TreedockError, ValueError):
    pass


class SchemaError(TreedockError, ValueError):
    pass


class EpisodeFinished(TreedockError, RuntimeError):
    pass


class EpisodeUnfinished(TreedockError, RuntimeError):
    pass


class IllegalAction(TreedockError, ValueError):
    pass


class MissingDimer(TreedockError, KeyError):
    def __init__(self, i, j):
        self.pair = (min(i, j), max(i, j))
        super().__init__(f"no dimer for chain pair {self.pair}")

    def __str__(self):
        return self.args[0]


class ShapeMismatch(TreedockError, ValueError):
    pass


class IndexOutOfRange(TreedockError, IndexError):
    pass


class KeyMismatch(TreedockError, KeyError):
    pass


class EmptyBatch(TreedockError, ValueError):
    pass


class NonFiniteLoss(TreedockError, FloatingPointError):
    pass


class DomainError(TreedockError, ValueError):
    pass


class TooLarge(TreedockError, ValueError):
    pass


class IncompatibleCheckpoint(TreedockError, ValueError):
    pass
