"""Training recipes for test networks on distilled or very small datasets."""
from .arch_zoo import ArchSpec, build_model
from .augment import AugmentConfig, augment_batch
from .config import RunConfig, load_config
from .curvature import hvp, landscape_slice, top_eigenpairs
from .datastore import DatasetContainer, RunRecord, read_container, sample_fraction, write_container
from .errors import ConfigError, DistilEvalError, FormatError, NumericError, ShapeError
from .harness import describe, evaluate, train_student, train_teacher
from .lion_optim import Lion, LionConfig, lion_step
from .objectives import KDConfig, Targets, kd_loss
from .schedules import KeepRateConfig, LRConfig, keep_rate, learning_rate

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "augment_batch",
    "AugmentConfig",
    "build_model",
    "ConfigError",
    "DatasetContainer",
    "describe",
    "DistilEvalError",
    "evaluate",
    "FormatError",
    "hvp",
    "kd_loss",
    "KDConfig",
    "keep_rate",
    "KeepRateConfig",
    "landscape_slice",
    "learning_rate",
    "Lion",
    "lion_step",
    "LionConfig",
    "load_config",
    "LRConfig",
    "NumericError",
    "read_container",
    "RunConfig",
    "RunRecord",
    "sample_fraction",
    "ShapeError",
    "Targets",
    "top_eigenpairs",
    "train_student",
    "train_teacher",
    "write_container",
]
