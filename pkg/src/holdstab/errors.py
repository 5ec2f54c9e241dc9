"""Exception hierarchy shared by all modules."""


class HoldStabError(Exception):
    pass


class DomainError(HoldStabError, ValueError):
    """Argument outside the domain of a function (negative radius, forecast past blow-up, ...)."""

    def __init__(self, message, limit=None):
        super().__init__(message)
        self.limit = limit


class InputError(HoldStabError, ValueError):
    pass


class ConfigError(HoldStabError, ValueError):
    pass


class NumericError(HoldStabError, ArithmeticError):
    def __init__(self, message, coords=None):
        super().__init__(message)
        self.coords = coords


class DivergenceError(NumericError):
    def __init__(self, message, time):
        super().__init__(message)
        self.time = time
