"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(ValueError):
    """A configuration value is degenerate or out of bounds."""


class CapacityError(ValueError):
    """More ground-truth objects than prediction slots."""


class DegenerateDirectionError(ValueError):
    """Combined gaze direction cancels out and cannot be normalised."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at optimizer step {step}")


class GenerationError(RuntimeError):
    """Synthetic scene or dataset generation failed."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero vector."""
