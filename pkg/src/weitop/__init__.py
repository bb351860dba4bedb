"""Weighted optimal-transport aggregation (WeiAD) and self-distilled token pruning (WeiToP)."""
from .aggregation import FULL_SCALE_TIERS, TOY_TIERS, TierConfig, WeiAD, descriptor_length, tier_weights
from .data import BENCHMARK, SynthDataset, benchmark_split, make_synth_dataset
from .encoder import EncoderConfig, ToyViT, flop_count
from .estimators import PlaceRetriever, WeiADEncoder
from .io import Checkpoint, TokenFile, load_model, save_checkpoint
from .model import ModelConfig, WeiADNet, make_config
from .numerics import DomainError, NumericError
from .ot import build_extended_scores, default_marginals, sinkhorn_solve
from .pruning import distill_loss, keep_count, prune_scores, select_topk
from .retrieval import DescriptorDb, evaluate, knn_search, recall_at_k, rho_sweep
from .training import MsLossConfig, TrainConfig, ms_loss, train

__version__ = "0.1.0"

__all__ = [
    "FULL_SCALE_TIERS",
    "TOY_TIERS",
    "TierConfig",
    "WeiAD",
    "descriptor_length",
    "tier_weights",
    "BENCHMARK",
    "SynthDataset",
    "benchmark_split",
    "make_synth_dataset",
    "EncoderConfig",
    "ToyViT",
    "flop_count",
    "PlaceRetriever",
    "WeiADEncoder",
    "Checkpoint",
    "TokenFile",
    "load_model",
    "save_checkpoint",
    "ModelConfig",
    "WeiADNet",
    "make_config",
    "DomainError",
    "NumericError",
    "build_extended_scores",
    "default_marginals",
    "sinkhorn_solve",
    "distill_loss",
    "keep_count",
    "prune_scores",
    "select_topk",
    "DescriptorDb",
    "evaluate",
    "knn_search",
    "recall_at_k",
    "rho_sweep",
    "MsLossConfig",
    "TrainConfig",
    "ms_loss",
    "train",
]
