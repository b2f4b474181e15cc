"""File formats, preprocessing and synthetic data."""

from .io import load_dataset, save_dataset
from .preprocess import aggregate_levels, level_membership, normalize, select_top_genes
from .synthetic import SyntheticSpec, generate_batch, generate_synthetic

__all__ = [
    "SyntheticSpec", "aggregate_levels", "generate_batch", "generate_synthetic", "level_membership",
    "load_dataset", "normalize", "save_dataset", "select_top_genes",
]
