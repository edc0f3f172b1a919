"""Exception types shared across the toolkit.

Everything derives from ValueError so callers that do not care about the
fine-grained type can catch a single base.
"""


class MalformedRow(ValueError):
    """A CSV row could not be parsed into the expected fields."""


class InvariantViolation(ValueError):
    """A domain-type invariant does not hold (e.g. high < low)."""


class GenerationExhausted(RuntimeError):
    """Rejection sampling failed to produce a valid window within budget."""


class DomainError(ValueError):
    """A numeric argument lies outside the function's domain."""


class ShapeMismatch(ValueError):
    """Tensor shapes are inconsistent with the model architecture."""


class LengthMismatch(ValueError):
    """Flat-vector length does not match the parameter count."""


class EmptySplit(ValueError):
    """An evaluation split contains no samples."""


class NonFiniteGradient(ValueError):
    """A gradient vector contains NaN or infinite entries."""


class ConfigInvalid(ValueError):
    """A configuration value lies outside its consumer's validated domain."""


class TooFewSamples(ValueError):
    """Not enough samples to satisfy a partitioning request."""


class BudgetExceeded(ValueError):
    """More label queries requested than the configured privacy budget."""
