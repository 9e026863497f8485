"""Shared exception types, mapped to CLI exit codes in minreal.cli."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters (CLI exit code 2)."""


class MissingArtifact(FileNotFoundError):
    """A required input file (dataset, checkpoint, mask) is absent (exit code 3)."""


class TrainingAbort(RuntimeError):
    """Non-finite loss or state encountered during training (exit code 4)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
