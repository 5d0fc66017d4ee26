"""Exception types raised across the package."""


class CPGMError(Exception):
    """Base class for all package errors."""


class ShapeError(CPGMError, ValueError):
    pass


class DomainError(CPGMError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ContractError(CPGMError, ValueError):
    """A documented precondition of an operation was violated."""


class DegenerateBatchError(ContractError):
    pass


class InsufficientDataError(CPGMError, ValueError):
    def __init__(self, class_id, count):
        super().__init__(
            f"class {class_id} has {count} correctly classified samples; at least 2 are needed"
        )
        self.class_id = class_id
        self.count = count


class FormatError(CPGMError, ValueError):
    pass


class SpecError(CPGMError, ValueError):
    """An experiment or split specification is internally inconsistent."""


class ConfigError(CPGMError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
