"""Exception types shared across the package."""


class DivergenceError(RuntimeError):
    """Training or evaluation produced a non-finite value.

    Carries the iteration (or epoch) index at which the divergence was
    detected so callers can report where optimization blew up.
    """

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(ValueError):
    """A text input could not be parsed; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line
