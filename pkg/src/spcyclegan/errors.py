"""Exception hierarchy. Each category maps to a CLI exit code."""


class SPCycleGANError(Exception):
    exit_code = 1


class ValidationError(SPCycleGANError, ValueError):
    """Invalid argument, config value or label content."""

    exit_code = 2


class DimensionError(SPCycleGANError, ValueError):
    """Tensor or image shapes are incompatible."""

    exit_code = 3


class IngestionError(SPCycleGANError, IOError):
    """A dataset file could not be read or decoded."""

    exit_code = 3


class TrainingError(SPCycleGANError, RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""

    exit_code = 4


class MissingArtifactError(SPCycleGANError, FileNotFoundError):
    """A pipeline stage needs output from an earlier stage that is absent."""

    exit_code = 5
