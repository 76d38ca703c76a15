"""Exception hierarchy shared by every stage of the pipeline."""


class SmpError(Exception):
    """Base class for errors raised by smplab."""


class ConfigError(SmpError, ValueError):
    """Invalid configuration, shape mismatch or malformed file."""


class InputError(SmpError, ValueError):
    """An argument is outside the domain an operation accepts."""


class TrainingError(SmpError, RuntimeError):
    """Optimization produced non-finite values or diverged."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class SimulationError(SmpError, RuntimeError):
    """The physics integrator produced a non-finite state."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
