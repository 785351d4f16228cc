"""Minimal numpy neural kernels with hand-written, checkable backward passes."""

from .ops import (
    conv2d,
    conv2d_backward,
    batchnorm,
    batchnorm_backward,
    prelu,
    prelu_backward,
    blurpool,
    blurpool_backward,
    dropblock,
    dropblock_backward,
)
from .encoder import (
    EncoderArch,
    ToyEncoder,
    TrainPhase,
    encoder_forward,
    encoder_forward_backward,
    bn_tune_step,
    default_visual,
    default_audio,
    is_bn_param,
)
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    "conv2d", "conv2d_backward",
    "batchnorm", "batchnorm_backward",
    "prelu", "prelu_backward",
    "blurpool", "blurpool_backward",
    "dropblock", "dropblock_backward",
    "EncoderArch", "ToyEncoder", "TrainPhase",
    "encoder_forward", "encoder_forward_backward", "bn_tune_step",
    "default_visual", "default_audio", "is_bn_param",
    "save_checkpoint", "load_checkpoint",
]
