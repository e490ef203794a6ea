"""Multimodal dementia diagnosis with clinical-knowledge injection and prototype memory.

Everything is built on a small numpy autodiff engine (:mod:`holodx.numerics`).
"""

from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, preset_config
from .model import HoloDx
from .train import Trainer

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "TrainConfig", "preset_config", "HoloDx", "Trainer"]
__version__ = "0.1.0"
