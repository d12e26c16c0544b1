class ConfigError(ValueError):
    """Invalid configuration value. ``field`` is a dotted path into the config."""

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class StrategyError(RuntimeError):
    pass
