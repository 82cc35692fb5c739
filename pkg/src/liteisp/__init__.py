"""A three-layer learned RAW-to-RGB pipeline with paired and unpaired training."""

from .backbone import IspModel, param_count
from .config import ConfigError, TrainConfig, load_config
from .raw_pipeline import RawPatch, demosaic, pack

__version__ = "0.1.0"

__all__ = ["IspModel", "param_count", "ConfigError", "TrainConfig", "load_config", "RawPatch", "demosaic", "pack"]
