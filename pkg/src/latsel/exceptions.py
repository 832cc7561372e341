"""Exception types shared across the package."""


class ModelError(ValueError):
    """Invalid graph, model, covariance or role specification."""


class DegenerateError(ArithmeticError):
    """A quantity the formulas require to be nonzero or nonsingular is not."""


class NotIdentifiableError(ValueError):
    """A zero pattern does not pin down the rank-one decomposition."""


class MisspecificationError(ValueError):
    """The covariance contradicts the one-factor structure it is claimed to have."""
