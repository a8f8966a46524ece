"""Masked-transformer completion of dropout in spatial transcriptomics.

The pipeline is: load or synthesize a dataset, normalize, optionally select
spatially structured genes, pre-complete missing entries with a local median,
then train a small transformer encoder over 2-hop hexagonal neighborhoods to
reconstruct randomly hidden observed entries.
"""

from .dataset_io import Dataset, DatasetError, SpotRecord, generate_synthetic, load_dataset, save_dataset
from .hexgrid import UnknownSpotError, hex_neighbors
from .kernels import BACKEND as KERNEL_BACKEND
from .masking import MaskSpec, apply_mask, inference_mask, sample_mask
from .model import Checkpoint, ModelConfig, ModelError, complete_spot, load_checkpoint, save_checkpoint
from .neighborhoods import ExpressionBlock, build_block
from .preprocess import (CompletionProvenance, DegenerateStatisticError, Source, median_complete, morans_i,
                         normalize, select_genes)
from .training import (EvalReport, TrainConfig, TrainingDiverged, TrainingError, corruption_sweep, evaluate,
                       lr_search, train)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CompletionProvenance", "Dataset", "DatasetError", "DegenerateStatisticError", "EvalReport",
    "ExpressionBlock", "KERNEL_BACKEND", "MaskSpec", "ModelConfig", "ModelError", "Source", "SpotRecord",
    "TrainConfig", "TrainingDiverged", "TrainingError", "UnknownSpotError", "apply_mask", "build_block",
    "complete_spot", "corruption_sweep", "evaluate", "generate_synthetic", "hex_neighbors", "inference_mask",
    "load_checkpoint", "load_dataset", "lr_search", "median_complete", "morans_i", "normalize", "sample_mask",
    "save_checkpoint", "save_dataset", "select_genes", "train",
]
