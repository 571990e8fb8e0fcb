"""PATE-style private aggregation of segmentation masks through low-dimensional codes."""

__version__ = "0.1.0"

from .accountant import (
    PrivacyBudget,
    QueryPlan,
    calibrate_sigma,
    compose_epsilon,
    optimal_alpha,
    privacy_curve,
)
from .volume import BinaryMask, BlockGrid, Volume, block_merge, block_split, clip_to_ball, dice

__all__ = [
    "BinaryMask",
    "BlockGrid",
    "PrivacyBudget",
    "QueryPlan",
    "Volume",
    "block_merge",
    "block_split",
    "calibrate_sigma",
    "clip_to_ball",
    "compose_epsilon",
    "dice",
    "optimal_alpha",
    "privacy_curve",
]
