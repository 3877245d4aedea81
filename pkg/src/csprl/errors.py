"""Exception types shared across the package."""


class InputError(ValueError):
    """Rejected input: wrong shape, non-finite value, invalid simplex point."""


class ConfigError(ValueError):
    """Invalid configuration (out-of-range tweak, unknown archetype, bad schema)."""


class TrainingFault(RuntimeError):
    """Non-finite loss or gradient during optimisation."""


class CapacityError(RuntimeError):
    """The subspace already holds the maximum number of anchors."""


class TaskIsolationError(RuntimeError):
    """A finished task's buffer or environment was accessed."""


class CheckpointError(ValueError):
    """Malformed checkpoint file. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
