"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a shape or compatibility precondition."""


class TraceError(RuntimeError):
    """A backward pass was requested without a matching forward trace."""


class DegenerateInputError(ValueError):
    """The input makes the requested quantity undefined (zero norm, constant scores)."""


class UnpersonalizableError(DegenerateInputError):
    """A support set holds no pair of samples with distinct scores."""


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or parameter."""


class DependencyError(RuntimeError):
    """A required artifact (checkpoint, archive, run) is missing or inconsistent."""
