"""Exception hierarchy shared by every module.

Validation problems (bad shapes, bad configs, malformed inputs) derive from
``ValueError`` so the CLI can map them to exit code 1; everything else is a
runtime failure.
"""


class ValidationError(ValueError):
    """A user-supplied value violates a documented constraint."""


class ShapeError(ValidationError):
    """Tensor dimensions are inconsistent for the requested operation."""


class ConfigError(ValidationError):
    """An architecture or experiment configuration is invalid."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class WavParseError(ValidationError):
    """A RIFF/WAVE stream could not be parsed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class StateError(RuntimeError):
    """An operation was invoked on an object in the wrong state."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward/backward pass or an update."""
