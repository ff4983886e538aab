"""Exception types shared across the package."""


class NtkuqError(Exception):
    """Base class for package errors."""


class IllConditionedError(NtkuqError):
    """The train-train matrix is too ill-conditioned for a direct solve.

    Callers should fall back to the iterative GD-map path.
    """


class DivergenceError(NtkuqError):
    """Training or GD-map evolution diverged (learning rate too large)."""
