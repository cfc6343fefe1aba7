"""Pruning-aware tuning for a small decoder language model.

Train with a shared differentiable channel mask and low-rank sparsification
transforms, then merge everything into the base weights and slice the hidden
dimension down to the kept channels. The sliced model's logits match the
masked model's.
"""

from .autodiff import Tape, Tensor, backward
from .data import Dataset, ingest
from .errors import ConfigError, DimensionError, LifecycleError, NumericalError
from .evalbench import bench_forward, exact_match, perplexity, verify_equivalence
from .lora import LoraAdapter, lora_forward, merge_lora
from .model import ModelConfig, ModelState, forward, init_model
from .pruner import PruneReport, merge_hsm, prune_model, rescale_norm_gain, slice_model
from .sparsify import (BinaryMask, HybridSparsifier, UnifiedMask, active_loss,
                       finalize_mask, gate, hsm_forward, identity_loss)
from .trainer import Adam, TrainConfig, composite_loss, cosine_lr, train

__all__ = [
    "Adam", "BinaryMask", "ConfigError", "Dataset", "DimensionError",
    "HybridSparsifier", "LifecycleError", "LoraAdapter", "ModelConfig",
    "ModelState", "NumericalError", "PruneReport", "Tape", "Tensor",
    "TrainConfig", "UnifiedMask", "active_loss", "backward", "bench_forward",
    "composite_loss", "cosine_lr", "exact_match", "finalize_mask", "forward",
    "gate", "hsm_forward", "identity_loss", "ingest", "init_model",
    "lora_forward", "merge_hsm", "merge_lora", "perplexity", "prune_model",
    "rescale_norm_gain", "slice_model", "train", "verify_equivalence",
]
