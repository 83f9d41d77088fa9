"""Multi-task sequence labelling with sparsely shared, mask-selected subnetworks."""

from .errors import (
    ConfigError,
    DivergenceError,
    IntegrityError,
    SparseSharingError,
)
from .masks import MaskMatrix, ParamSpace, hard_sharing_masks, hierarchical_masks, overlap_ratio, sparsity
from .model import BaseNetwork, ModelConfig, TaskHead, init_parameters, load_word_vectors
from .imp import ImpConfig, generate_subnets, multi_task_warmup, select_subnet
from .trainer import TrainerConfig, masked_update, train_hard_sharing, train_parallel

__version__ = "0.1.0"

__all__ = [
    "BaseNetwork",
    "ConfigError",
    "DivergenceError",
    "ImpConfig",
    "IntegrityError",
    "MaskMatrix",
    "ModelConfig",
    "ParamSpace",
    "SparseSharingError",
    "TaskHead",
    "TrainerConfig",
    "generate_subnets",
    "hard_sharing_masks",
    "hierarchical_masks",
    "init_parameters",
    "load_word_vectors",
    "masked_update",
    "multi_task_warmup",
    "overlap_ratio",
    "select_subnet",
    "sparsity",
    "train_hard_sharing",
    "train_parallel",
]
