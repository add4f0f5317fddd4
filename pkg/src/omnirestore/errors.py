"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation received tensors with incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value violates a precondition."""


class CheckpointCorruptError(RuntimeError):
    """Checkpoint file is truncated or its framing is invalid."""


class CheckpointVersionError(RuntimeError):
    """Checkpoint format version is not supported by this build."""


class ConfigMismatchError(RuntimeError):
    """Checkpoint configuration is incompatible with the requested one."""


class NumericsError(RuntimeError):
    """A non-finite value surfaced during training.

    Carries per-stage activation statistics so the offending stage can be
    identified without rerunning.
    """

    def __init__(self, message, stage_stats=None):
        super().__init__(message)
        self.stage_stats = dict(stage_stats or {})
