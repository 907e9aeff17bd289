"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's documented precondition."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class FormatError(RuntimeError):
    """A file or byte stream does not match its expected format."""


class StateError(RuntimeError):
    """A required artifact or piece of runtime state is missing or unusable."""


class EvaluationError(RuntimeError):
    """A numeric evaluation produced an unusable (non-finite) result."""
