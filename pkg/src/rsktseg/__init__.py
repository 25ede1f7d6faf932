"""Open-vocabulary remote-sensing segmentation with rotation-aligned cost volumes."""

from .foundation import ClassVocabulary, EncoderSpec, ImageSample, encode_image, encode_text, rot90
from .transfer import DecoderConfig, ModelConfig, RSKTSeg, load_checkpoint, save_checkpoint
from .fusion import FusionConfig
from .training import TrainConfig, train

__all__ = [
    "ClassVocabulary",
    "DecoderConfig",
    "EncoderSpec",
    "FusionConfig",
    "ImageSample",
    "ModelConfig",
    "RSKTSeg",
    "TrainConfig",
    "encode_image",
    "encode_text",
    "load_checkpoint",
    "rot90",
    "save_checkpoint",
    "train",
]
