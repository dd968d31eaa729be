"""Semi-parametric inducing-point networks."""
from .config import ModelConfig, RunConfig, TrainConfig, validate_config
from .model import SpinModel
from .schema import Attribute, Schema

__version__ = "0.1.0"

__all__ = ["Attribute", "ModelConfig", "RunConfig", "Schema", "SpinModel", "TrainConfig", "validate_config"]
