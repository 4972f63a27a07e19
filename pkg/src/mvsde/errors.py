"""Exception hierarchy shared by every module of the package."""


class MVSDEError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MVSDEError, ValueError):
    """An argument is outside the documented domain (non-finite, negative, ...)."""


class InfeasibleSetError(InvalidInputError):
    """A convex set is empty or has empty interior."""


class ConvergenceError(MVSDEError, RuntimeError):
    """An iterative routine exhausted its iteration budget."""


class CapabilityError(MVSDEError):
    """A required callback (derivative, coefficient) was not supplied."""


class BlowUpError(MVSDEError, FloatingPointError):
    """A particle left the numerically admissible region during simulation."""

    def __init__(self, particle, step, value):
        self.particle = int(particle)
        self.step = int(step)
        self.value = value
        super().__init__(
            f"particle {self.particle} blew up at step {self.step} (|X| = {value!r})"
        )


class ConfigError(MVSDEError):
    """Configuration failed validation; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
