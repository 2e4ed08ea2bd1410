"""Exception hierarchy shared across the package."""


class CorrstabError(Exception):
    pass


class ParseError(CorrstabError, ValueError):
    """Malformed input text. Carries the 1-based line number or byte offset."""

    def __init__(self, message, lineno=None, offset=None):
        where = ""
        if lineno is not None:
            where = f" (line {lineno})"
        elif offset is not None:
            where = f" (byte offset {offset})"
        super().__init__(message + where)
        self.lineno = lineno
        self.offset = offset


class ValidationError(CorrstabError, ValueError):
    pass


class SchemaError(ParseError):
    pass


class ConfigError(CorrstabError, ValueError):
    pass


class PreconditionError(CorrstabError, ValueError):
    pass


class NumericError(CorrstabError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
