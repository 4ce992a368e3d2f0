"""Semi-supervised semantic segmentation with hierarchical class-text queries (toy-scale)."""

from .config import ClassSpec, DataConfig, ExperimentConfig, ModelConfig, TrainConfig
from .model import HVLFormer

__all__ = ["ClassSpec", "DataConfig", "ExperimentConfig", "HVLFormer", "ModelConfig", "TrainConfig"]
__version__ = "0.1.0"
