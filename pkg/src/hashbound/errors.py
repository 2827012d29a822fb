"""Exception types shared across hashbound modules."""


class HashboundError(Exception):
    """Base class for all hashbound errors."""


class InvalidInputError(HashboundError, ValueError):
    """An argument violates an operation's precondition."""


class UnsupportedWidthError(HashboundError, ValueError):
    """Code length exceeds what an exact-table operation supports (h > 16)."""


class UndefinedMetricError(HashboundError, ValueError):
    """A metric is undefined for this input (e.g. AP with zero relevant entries)."""


class EmptyBallError(HashboundError, ValueError):
    """No base samples fall inside the requested Hamming ball."""


class HadamardNotApplicableError(HashboundError, ValueError):
    """Hadamard center construction does not apply; caller should fall back."""


class InfeasibleError(HashboundError, ValueError):
    """Requested configuration is impossible (e.g. more classes than codes)."""


class UndefinedCorrelationError(HashboundError, ValueError):
    """Rank correlation is undefined (constant series)."""


class InvalidConfigError(HashboundError, ValueError):
    """Run configuration is inconsistent (e.g. a label without a center)."""


class InvalidStateError(HashboundError, RuntimeError):
    """Operation used state that is no longer current (e.g. a stale cache)."""


class TrainingDivergenceError(HashboundError, RuntimeError):
    """Training produced non-finite losses or gradients."""
