"""
Exception hierarchy for the BiKop few-shot learner
"""


class BiKopError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(BiKopError):
    """Invalid, unknown or mistyped configuration key"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DatasetError(BiKopError):
    """Dataset cannot be generated or loaded"""


class EpisodeSamplingError(BiKopError):
    """Split does not hold enough classes or images for the requested episode"""


class ShapeError(BiKopError, ValueError):
    """Tensor dimensions do not match the declared contract"""


class ZeroNormError(BiKopError, ValueError):
    """Cosine similarity requested for a zero-norm vector"""


class UnevenShotsError(BiKopError, ValueError):
    """Support labels do not appear the same number of times"""


class NonFiniteError(BiKopError, FloatingPointError):
    """A tensor that must be finite contains NaN or inf"""


class TrainingDivergedError(BiKopError):
    """Loss became non-finite during optimization"""


class CheckpointError(BiKopError):
    """Checkpoint cannot be read"""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or malformed"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version"""


class MissingArtifactError(BiKopError):
    """A command needs an artifact that an earlier command has not produced"""

    def __init__(self, artifact: str, hint: str = ""):
        self.artifact = artifact
        message = f"missing artifact: {artifact}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)


class AttentionUnavailableError(BiKopError):
    """Attention maps requested from a model without cross-attention permeation"""


class MmcUndefinedError(BiKopError, ValueError):
    """Channel magnitudes are all zero so their coefficient of variation is undefined"""


class AblationConfigError(BiKopError):
    """Ablation cell combines incompatible toggles"""


class UnknownClassError(DatasetError, KeyError):
    """Class id or split name is not registered in the dataset"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class PromptSlotError(BiKopError, IndexError):
    """Prompt slot outside the learned prompt bank"""
