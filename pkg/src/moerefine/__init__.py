"""Mixture-of-experts refinement of precomputed dense-retrieval embeddings."""

from ._backend import backend_name
from .data_io import EmbeddingMatrix, RankedList, SyntheticSpec, gen_synthetic
from .moe_block import (
    MoEBlock,
    block_fingerprint,
    init_block,
    load_checkpoint,
    refine_batch,
    save_checkpoint,
)
from .training import Checkpoint, TrainingConfig, TrainPair, contrastive_loss, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EmbeddingMatrix",
    "MoEBlock",
    "RankedList",
    "SyntheticSpec",
    "TrainPair",
    "TrainingConfig",
    "backend_name",
    "block_fingerprint",
    "contrastive_loss",
    "gen_synthetic",
    "init_block",
    "load_checkpoint",
    "refine_batch",
    "save_checkpoint",
    "train",
    "__version__",
]
