"""Exception hierarchy shared across the package."""


class PastaError(Exception):
    """Base class for every error raised by this package."""


# --- annotation language -------------------------------------------------

class ParseError(PastaError):
    """Raised when annotated text does not form a valid response."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


class UnbalancedAsync(ParseError):
    pass


class OrphanAsync(ParseError):
    pass


class PromiseWithoutBlock(ParseError):
    pass


class MalformedAttribute(ParseError):
    pass


class NestedAsync(ParseError):
    pass


class MissingTopic(ParseError):
    pass


# --- metrics --------------------------------------------------------------

class NonPositiveValue(PastaError, ValueError):
    pass


# --- interpreter ----------------------------------------------------------

class InterpreterError(PastaError):
    pass


class PoolOverflow(InterpreterError):
    pass


class MaxThreadsExceeded(InterpreterError):
    pass


class RowExhausted(MaxThreadsExceeded):
    """The naive batched interpreter ran out of preallocated rows."""


class RunawayFork(InterpreterError):
    pass


class MissingOracleLength(InterpreterError):
    pass


# --- backends -------------------------------------------------------------

class BackendError(PastaError):
    pass


class ScriptExhausted(BackendError):
    pass


class UnknownSlot(BackendError):
    pass


class ContextTooLong(BackendError):
    pass


# --- training data ----------------------------------------------------------

class AttributeMissing(PastaError):
    pass


class InvalidAnnotation(PastaError):
    """Parsed fine but failed an error-level validation check."""


class CorpusError(PastaError):
    pass


class FileUnreadable(CorpusError):
    pass


class MalformedRecord(CorpusError):
    pass


# --- preference pipeline ------------------------------------------------------

class TooFewCandidates(PastaError):
    pass


class DegeneratePair(PastaError):
    """Best and worst candidate coincide, so no preference pair exists."""


class NonPositiveBeta(PastaError, ValueError):
    pass


class JudgeError(PastaError):
    """A judge call failed; ``pair`` identifies the comparison."""

    def __init__(self, message: str, pair: object = None):
        self.pair = pair
        if pair is not None:
            message = f"{message} [pair={pair!r}]"
        super().__init__(message)


class JudgeTimeout(JudgeError):
    pass


class MalformedReply(JudgeError):
    pass


class QuotaExceeded(JudgeError):
    pass
