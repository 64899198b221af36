from typing import Optional


class DrelabError(Exception):
    pass


class InputError(DrelabError, ValueError):
    pass


class ConfigError(InputError):
    field: str

    def __init__(self, field: str, message: Optional[str] = None):
        self.field = field
        super().__init__(message or f"missing or invalid config field: {field}")


class ParseError(InputError):
    line: Optional[int]
    offset: Optional[int]

    def __init__(self, message: str, line: Optional[int] = None, offset: Optional[int] = None):
        self.line = line
        self.offset = offset
        location = []
        if line is not None:
            location.append(f"line {line}")
        if offset is not None:
            location.append(f"offset {offset}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")


class VersionError(InputError):
    pass


class UnsupportedModelError(InputError):
    pass


class UnsupportedOpError(InputError):
    op: str

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"no derivative rule registered for op '{op}'")


class EmptyPairsError(InputError):
    pass


class DegenerateDistributionError(InputError):
    pass


class DegenerateBaselineError(InputError):
    pass


class DegenerateAttributionError(InputError):
    pass


class NumericError(DrelabError, ArithmeticError):
    node: Optional[str]
    parameter: Optional[str]

    def __init__(self, message: str, node: Optional[str] = None, parameter: Optional[str] = None):
        self.node = node
        self.parameter = parameter
        super().__init__(message)


class TrainingDivergedError(NumericError):
    step: int

    def __init__(self, step: int, last_breakdown=None, cause: Optional[Exception] = None):
        self.step = step
        self.last_breakdown = last_breakdown
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"training diverged at step {step}{detail}")
