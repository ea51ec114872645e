"""Exception types shared across the package."""


class TsadError(Exception):
    """Base class for all package errors."""


class DimensionError(TsadError, ValueError):
    pass


class ContractError(TsadError, ValueError):
    """A precondition of an operation was violated."""


class StateError(TsadError, RuntimeError):
    pass


class ValidationError(TsadError, ValueError):
    """A genome or config field is outside its allowed range."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ParseError(TsadError, ValueError):
    """Malformed input file. Carries the path and 1-based row when known."""

    def __init__(self, message, path=None, row=None):
        self.path = path
        self.row = row
        where = ""
        if path is not None:
            where = f"{path}:{row}: " if row is not None else f"{path}: "
        super().__init__(where + message)


class TrainingError(TsadError, RuntimeError):
    pass


class SearchError(TsadError, RuntimeError):
    pass
