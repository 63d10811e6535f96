"""Unsupervised 2D-to-3D keypoint lifting with a Procrustean shape
auto-encoder (PAUL).

A shape auto-encoder and a 2D-3D lifting network are trained purely from
2D keypoint projections: each training step solves every frame's rigid
pose and depth in closed form (an orthographic-N-point problem) and
backpropagates the reconstruction objective through that solver.
"""

from .data import Dataset, SynthSpec, generate_synthetic, read_dataset, write_dataset
from .evaluation import (
    MetricConfig,
    evaluate,
    export_latents,
    latent_smoothness,
    mpjpe,
    normalized_error,
)
from .geometry import (
    NormalizedFrame,
    ObservationFrame,
    Rotation,
    Shape3D,
    adaptive_normalize,
    fuse_occluded,
    normalize_frame,
    onp_align_inference,
    onp_fit_depth,
    onp_fit_rotation,
    project_weak_perspective,
)
from .networks import MlpSpec, ModelParams, build_model, load_checkpoint, save_checkpoint
from .trainer import Adam, LossBreakdown, StepReport, TrainConfig, fit, predict, train_step

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Dataset",
    "LossBreakdown",
    "MetricConfig",
    "MlpSpec",
    "ModelParams",
    "NormalizedFrame",
    "ObservationFrame",
    "Rotation",
    "Shape3D",
    "StepReport",
    "SynthSpec",
    "TrainConfig",
    "adaptive_normalize",
    "build_model",
    "evaluate",
    "export_latents",
    "fit",
    "fuse_occluded",
    "generate_synthetic",
    "latent_smoothness",
    "load_checkpoint",
    "mpjpe",
    "normalize_frame",
    "normalized_error",
    "onp_align_inference",
    "onp_fit_depth",
    "onp_fit_rotation",
    "predict",
    "project_weak_perspective",
    "read_dataset",
    "save_checkpoint",
    "train_step",
    "write_dataset",
    "__version__",
]
