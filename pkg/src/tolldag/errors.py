"""Exception types shared across the package."""


class TollDagError(Exception):
    """Base class for all package-specific errors."""


class NoRoute(TollDagError):
    """No directed origin->destination path exists."""


class RouteExplosion(TollDagError):
    """The number of acyclic routes exceeds the configured cap."""

    def __init__(self, cap: int):
        super().__init__(f"acyclic route count exceeds cap of {cap}")
        self.cap = cap


class DimensionMismatch(TollDagError):
    """An array argument has the wrong length for the graph at hand."""


class NegativeFlow(TollDagError):
    """A flow value was negative where nonnegativity is required."""


class NonFiniteInput(TollDagError):
    """An input array contains NaN or infinity."""


class NonFiniteState(TollDagError):
    """A simulation state became NaN or infinite."""


class NonAffineLatency(TollDagError):
    """An operation requiring affine latencies got a general one."""


class InvalidOptions(TollDagError):
    """Solver options are out of their admissible range."""


class NonConvergence(TollDagError):
    """A solver hit its iteration limit before reaching tolerance."""

    def __init__(self, iterations: int, residual: float, what: str = "solver"):
        super().__init__(
            f"{what} did not converge: residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.iterations = iterations
        self.residual = residual


class SocialGapViolation(TollDagError):
    """A converged toll fixed point disagrees with the social optimum.

    This signals a solver bug, not a modeling condition.
    """


class StepTooLarge(TollDagError):
    """The flow ODE potential increased; the integration step is too big."""


class LyapunovViolation(TollDagError):
    """The toll ODE Lyapunov function decayed slower than its bound."""


class BoundViolation(TollDagError):
    """A simulated trajectory left its proven bounds."""


class ParseError(TollDagError):
    """A network file failed to parse; names the offending field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ValidationError(TollDagError):
    """A parsed network violates a structural invariant."""
