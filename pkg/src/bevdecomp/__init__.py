"""Task-decomposed monocular BEV segmentation on procedural synthetic scenes.

Stage I trains a BEV autoencoder on noise-corrupted latents, Stage II aligns
image features to the frozen encoder's latents through a column-wise
transformer, and Stage III fine-tunes the decoder on the aligned latents.
Maps are learned in polar coordinates and evaluated on the Cartesian grid.
"""
from .config import ExperimentConfig, paper_scale
from .estimators import BevAutoencoder, BevSegmenter, PolarResampler
from .geometry import (CameraModel, GridSpec, PolarSpec, cart_to_polar, fov_mask,
                       polar_to_cart)
from .metrics import EvalReport, best_iou, evaluate, iou

__version__ = "0.1.0"

__all__ = [
    "BevAutoencoder", "BevSegmenter", "CameraModel", "EvalReport", "ExperimentConfig",
    "GridSpec", "PolarResampler", "PolarSpec", "best_iou", "cart_to_polar", "evaluate",
    "fov_mask", "iou", "paper_scale", "polar_to_cart",
]
