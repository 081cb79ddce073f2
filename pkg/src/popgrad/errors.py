"""Exception types raised across the package."""


class PopgradError(Exception):
    """Base class for all errors raised by popgrad."""


class ZeroVector(PopgradError, ValueError):
    pass


class DegenerateNeuron(PopgradError, ValueError):
    """A student neuron has zero norm, where the loss is not differentiable."""

    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"student neuron {index} has zero norm")


class DegenerateUpdate(DegenerateNeuron):
    """A gradient step produced a zero neuron."""

    def __init__(self, index, step=None):
        where = "" if step is None else f" at step {step}"
        super().__init__(index, f"update produced a zero norm for neuron {index}{where}")


class NonFinite(PopgradError, FloatingPointError):
    pass


class StiffnessFailure(PopgradError, RuntimeError):
    pass


class BadParam(PopgradError, ValueError):
    pass


class NotSymmetric(PopgradError, ValueError):
    pass


class BadProjection(PopgradError, ValueError):
    pass


class InsufficientData(PopgradError, ValueError):
    pass


class ConfigError(PopgradError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
