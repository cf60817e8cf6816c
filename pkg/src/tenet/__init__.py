"""Video saliency network whose branches excite one another's features."""

from tenet.data import DatasetSpec, FlowField, VideoClip, generate_synthetic_dataset, load_clip, preprocess
from tenet.excitation import ExcitationRate, curriculum_alpha, curriculum_state, excite, make_excitation_map
from tenet.model import FrameOutputs, ModelConfig, TENet

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec",
    "ExcitationRate",
    "FlowField",
    "FrameOutputs",
    "ModelConfig",
    "TENet",
    "VideoClip",
    "curriculum_alpha",
    "curriculum_state",
    "excite",
    "generate_synthetic_dataset",
    "load_clip",
    "make_excitation_map",
    "preprocess",
]
