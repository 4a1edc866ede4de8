"""Exception types shared across the pipeline."""

from __future__ import annotations


class DefuseError(Exception):
    """Base class for every error raised by this package."""


class IrSyntaxError(DefuseError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"{line}:{column}: {message}")
        self.message = message
        self.line = line
        self.column = column


class UnsupportedConstruct(DefuseError):
    """Raised in strict mode for an opcode outside the supported subset."""

    def __init__(self, opcode: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unsupported construct: {opcode}{where}")
        self.opcode = opcode
        self.line = line


class IrValidationError(DefuseError):
    pass


class SchemaError(DefuseError):
    def __init__(self, message: str, rule: str | None = None):
        prefix = f"rule {rule!r}: " if rule else ""
        super().__init__(prefix + message)
        self.rule = rule


class DuplicateRuleName(SchemaError):
    def __init__(self, rule: str):
        super().__init__("duplicate rule name", rule)


class UnknownFunction(DefuseError, KeyError):
    def __init__(self, function: str):
        super().__init__(f"unknown function: {function}")
        self.function = function

    def __str__(self) -> str:
        return self.args[0]


class ExpansionBudgetExceeded(DefuseError):
    """Local taint expansion ran out of steps; ``partial`` holds what was reached."""

    def __init__(self, function: str, partial):
        super().__init__(f"local expansion budget exceeded in {function}")
        self.function = function
        self.partial = partial


class ReasonerFailure(DefuseError):
    pass


class StateContractViolation(DefuseError):
    pass
