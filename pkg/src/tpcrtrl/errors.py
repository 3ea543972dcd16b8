"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Arrays handed to a routine do not fit together."""


class UsageError(ValueError):
    """Invalid configuration or call pattern."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared during inference or learning."""

    def __init__(self, message, layer=None, iteration=None, time_index=None):
        self.layer = layer
        self.iteration = iteration
        self.time_index = time_index
        where = []
        if time_index is not None:
            where.append(f"t={time_index}")
        if layer is not None:
            where.append(f"layer={layer}")
        if iteration is not None:
            where.append(f"iteration={iteration}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
