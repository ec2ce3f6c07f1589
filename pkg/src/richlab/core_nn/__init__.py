"""Minimal deterministic neural-network engine (dense nets, losses, SGD)."""
from .layers import (
    ACTIVATIONS,
    CosineHead,
    DenseLayer,
    Network,
    as_feature_matrix,
    cosine_head_backward,
    cosine_head_forward,
    extract_features,
    forward,
    glorot_layer,
    init_cosine_network,
    init_network,
    load_network,
    network_from_bytes,
    network_to_bytes,
    save_network,
    stack_backward,
    stack_forward,
)
from .losses import (
    ce_kl_distill_loss,
    cosine_distill_loss,
    cross_entropy_loss,
    kl_distill_loss,
    log_softmax,
    softmax_temperature,
)
from .optim import MomentumState, NetGrads, Schedule, TrainConfig, lr_at, sgd_step
from .train import (
    accuracy,
    flatten_grads,
    flatten_params,
    network_loss_grad,
    predict_logits,
    set_flat_params,
    train,
)

__all__ = [
    "ACTIVATIONS",
    "CosineHead",
    "DenseLayer",
    "MomentumState",
    "NetGrads",
    "Network",
    "Schedule",
    "TrainConfig",
    "accuracy",
    "as_feature_matrix",
    "ce_kl_distill_loss",
    "cosine_distill_loss",
    "cosine_head_backward",
    "cosine_head_forward",
    "cross_entropy_loss",
    "extract_features",
    "flatten_grads",
    "flatten_params",
    "forward",
    "glorot_layer",
    "init_cosine_network",
    "init_network",
    "kl_distill_loss",
    "load_network",
    "log_softmax",
    "lr_at",
    "network_from_bytes",
    "network_loss_grad",
    "network_to_bytes",
    "predict_logits",
    "save_network",
    "set_flat_params",
    "sgd_step",
    "softmax_temperature",
    "stack_backward",
    "stack_forward",
    "train",
]
