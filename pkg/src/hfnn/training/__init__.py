"""Losses, optimiser, Grad-Norm balancing and the training loop."""

from .loop import (
    METRICS_HEADER,
    RunResult,
    TrainConfig,
    check_compatible,
    train,
    transfer_train,
    warmup_train,
    write_metrics,
)
from .optim import (
    AdamConfig,
    AdamState,
    GradNormConfig,
    adam_step,
    grad_norm_targets,
    grad_norm_update,
    learning_rate,
)
from .problems import TERMS, PinnModel, PinnProblem, Scaling, terms_for

__all__ = [
    "METRICS_HEADER",
    "RunResult",
    "TrainConfig",
    "check_compatible",
    "train",
    "transfer_train",
    "warmup_train",
    "write_metrics",
    "AdamConfig",
    "AdamState",
    "GradNormConfig",
    "adam_step",
    "grad_norm_targets",
    "grad_norm_update",
    "learning_rate",
    "TERMS",
    "PinnModel",
    "PinnProblem",
    "Scaling",
    "terms_for",
]
