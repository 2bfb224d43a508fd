"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` subclasses to exit code 1 and
:class:`NumericError` to exit code 2.
"""


class KdSpdError(Exception):
    pass


class ValidationError(KdSpdError):
    pass


class ShapeError(ValidationError, ValueError):
    pass


class ContractError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class ConflictError(ValidationError):
    pass


class MissingLanguageError(ValidationError, KeyError):
    pass


class MissingKeyError(ValidationError, KeyError):
    pass


class FormatError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}: "
        elif loc:
            loc += " "
        super().__init__(loc + message)


class NumericError(KdSpdError, ArithmeticError):
    pass
