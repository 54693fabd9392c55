"""Graph self-supervised learning with joint masked-autoencoder and
contrastive branches over a shared GCN encoder, built on a from-scratch
reverse-mode autodiff engine."""

__version__ = "0.1.0"

from .config import TrainConfig, config_hash, parse_config, serialize_config
from .graph import (Dataset, SbmSpec, SparseGraph, generate_sbm, khop_neighbors,
                    load_dataset, normalize, save_dataset)
from .model import ModelParams, embed, forward, init_params
from .training import TrainTrace, load_checkpoint, save_checkpoint, similarity_probe, train

__all__ = [
    "TrainConfig", "config_hash", "parse_config", "serialize_config",
    "Dataset", "SbmSpec", "SparseGraph", "generate_sbm", "khop_neighbors",
    "load_dataset", "normalize", "save_dataset",
    "ModelParams", "embed", "forward", "init_params",
    "TrainTrace", "load_checkpoint", "save_checkpoint", "similarity_probe", "train",
    "__version__",
]
