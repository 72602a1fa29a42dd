"""Exception types raised across the package."""


class MercatranError(Exception):
    """Base class for all package errors."""


class MalformedLine(MercatranError, ValueError):
    pass


class MissingField(MercatranError, KeyError):
    def __init__(self, field):
        super().__init__(field)
        self.field = field

    def __str__(self):
        return f"missing required field {self.field!r}"


class UnknownEventType(MercatranError, ValueError):
    pass


class InvalidConfig(MercatranError, ValueError):
    pass


class UnknownUser(MercatranError, KeyError):
    pass


class InvalidArg(MercatranError, ValueError):
    pass


class NaNInput(MercatranError, ValueError):
    pass


class ShapeMismatch(MercatranError, ValueError):
    pass


class TokenOutOfRange(MercatranError, IndexError):
    pass


class EmptyHistory(MercatranError, ValueError):
    pass


class HistoryTooLong(MercatranError, ValueError):
    pass


class NonUnitRows(MercatranError, ValueError):
    pass


class DimensionMismatch(MercatranError, ValueError):
    pass


class NonUnitEmbedding(MercatranError, ValueError):
    pass


class CorruptFile(MercatranError, ValueError):
    pass


class InvalidRank(MercatranError, ValueError):
    pass


class EmptyTestSet(MercatranError, ValueError):
    pass


class BadRequest(MercatranError, ValueError):
    pass


class NotReady(MercatranError, RuntimeError):
    pass
