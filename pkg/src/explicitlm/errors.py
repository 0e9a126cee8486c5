"""Exception hierarchy shared across the package."""


class ExplicitLMError(Exception):
    """Base class for all package errors."""


class DimensionError(ExplicitLMError, ValueError):
    pass


class NumericError(ExplicitLMError, ArithmeticError):
    pass


class ContractError(ExplicitLMError, ValueError):
    pass


class ConfigError(ExplicitLMError, ValueError):
    pass


class VocabularyError(ExplicitLMError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class BoundsError(ExplicitLMError, IndexError):
    pass


class DegenerateEntryError(NumericError):
    """A zero-norm query or an all-PAD memory entry reached a cosine or a pool."""


class FreezeViolationError(ExplicitLMError):
    pass


class PersistenceError(ExplicitLMError):
    pass


class MagicError(PersistenceError):
    pass


class VersionError(PersistenceError):
    pass


class TruncatedFileError(PersistenceError):
    pass


class DivergenceError(ExplicitLMError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class GenerationError(ExplicitLMError, ValueError):
    pass


class OracleError(ExplicitLMError):
    pass
