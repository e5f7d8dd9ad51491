"""Exception hierarchy shared by every ehdk module."""


class EHDKError(Exception):
    """Base class for all library errors."""


class ShapeError(EHDKError, ValueError):
    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ConfigError(EHDKError, ValueError):
    pass


class BoundsError(EHDKError, IndexError):
    pass


class StatisticsError(EHDKError, ValueError):
    pass


class StateError(EHDKError, RuntimeError):
    pass


class NumericError(EHDKError, ArithmeticError):
    def __init__(self, op, message="non-finite value"):
        self.op = op
        super().__init__(f"{message} in op '{op}'")


class ParseError(EHDKError, ValueError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ValidationError(EHDKError, ValueError):
    pass


class DivergenceError(EHDKError, ArithmeticError):
    def __init__(self, iteration, message="loss is not finite"):
        self.iteration = iteration
        super().__init__(f"{message} at iteration {iteration}")
