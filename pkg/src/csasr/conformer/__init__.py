"""Conformer acoustic model with joint CTC / attention training losses."""

from .config import ConformerConfig
from .layers import (
    ConformerBlock,
    ConvModule,
    MultiHeadAttention,
    conformer_block,
    conv_module,
    mhsa,
    subsampled_length,
)
from .losses import LossOutput, ce_loss, ctc_forward_backward, ctc_loss, ctc_min_frames, joint_loss
from .model import ASRModel, frame_targets, pad_batch

__all__ = [
    "ASRModel",
    "ConformerBlock",
    "ConformerConfig",
    "ConvModule",
    "LossOutput",
    "MultiHeadAttention",
    "ce_loss",
    "conformer_block",
    "conv_module",
    "ctc_forward_backward",
    "ctc_loss",
    "ctc_min_frames",
    "frame_targets",
    "joint_loss",
    "mhsa",
    "pad_batch",
    "subsampled_length",
]
