"""End-to-end human instance matting: synthetic scenes, model, losses, metrics and a training harness."""

from .compositing import Scene, SceneConfig, composite, generate_scene
from .config import RunConfig
from .model import InstanceMattingModel, ModelOutput
from .perception import NetworkConfig

__all__ = ["Scene", "SceneConfig", "composite", "generate_scene", "RunConfig", "InstanceMattingModel",
           "ModelOutput", "NetworkConfig"]
__version__ = "0.1.0"
