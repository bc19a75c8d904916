"""Mixed-scale triplet network for camouflaged object detection."""
from .config import Config, ModelConfig, load_config, tiny_model_config
from .model import TripletNet, build_model

__all__ = ["Config", "ModelConfig", "TripletNet", "build_model", "load_config", "tiny_model_config"]
__version__ = "0.1.0"
