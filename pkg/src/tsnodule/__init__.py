"""Two-stream 3D CNN for nodule malignancy from paired CT time-points."""
from .backbone import TAPS, Backbone, BackboneConfig, TapPoint, build_backbone
from .config import RunConfig, parse_config
from .model import HeadConfig, TwoStreamModel, build_model, forward_pair, forward_single
from .synth import SynthConfig
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"
__all__ = ["TAPS", "Backbone", "BackboneConfig", "TapPoint", "build_backbone", "RunConfig", "parse_config",
           "HeadConfig", "TwoStreamModel", "build_model", "forward_pair", "forward_single", "SynthConfig",
           "TrainConfig", "evaluate", "train"]
