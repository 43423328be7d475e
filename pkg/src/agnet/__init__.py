"""Attribute-guided vehicle re-identification: model, losses, data,
training loop and retrieval evaluation, all on numpy."""

from .model import (
    BranchOutputs,
    ChannelMask,
    Model,
    ModelConfig,
    attribute_mask,
    apply_mask,
    build_model,
    desk_config,
    forward_branch,
    forward_pair,
    guided_category_features,
    load_model,
    save_checkpoint,
    verification_head,
)
from .losses import (
    ALSParams,
    LossWeights,
    PairContext,
    als_loss,
    cross_entropy,
    epsilon_weight,
    total_loss,
)

__version__ = "0.1.0"

__all__ = [
    "ALSParams",
    "BranchOutputs",
    "ChannelMask",
    "LossWeights",
    "Model",
    "ModelConfig",
    "PairContext",
    "als_loss",
    "apply_mask",
    "attribute_mask",
    "build_model",
    "cross_entropy",
    "desk_config",
    "epsilon_weight",
    "forward_branch",
    "forward_pair",
    "guided_category_features",
    "load_model",
    "save_checkpoint",
    "total_loss",
    "verification_head",
]
