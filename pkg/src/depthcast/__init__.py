"""depthcast: stochastic prediction and completion of sparse depth-map sequences.

Two variational recurrent networks run in parallel: one regresses a dense
depth map, the other a sparsity mask that downsamples it back to a plausible
sparse frame. Built on a small numpy autodiff core whose every gradient is
checked against finite differences.
"""

from .tensor import Tensor, ShapeError, finite_diff_gradient, no_grad
from .sparse import MaskedFeature, sparse_conv2d
from .geometry import CameraIntrinsics, PointCloud, project, backproject, chamfer
from .model import (
    GaussianParams,
    ModelConfig,
    SparseDepthFrame,
    FrameBatch,
    VrnnModel,
    VrnnState,
    compose,
    rollout,
    save_checkpoint,
    load_checkpoint,
)
from .losses import LossBreakdown, masked_l2, kl_gauss, depth_loss, mask_loss
from .data import SynthConfig, Sequence, synth_sequence, synth_dataset, load_depth_png, save_depth_png, load_sequences, resize_nearest
from .training import TrainConfig, TrainReport, EvalConfig, AdamOptimizer, train_next_frame, train_joint_autoregressive, evaluate
from .estimator import SparseDepthForecaster

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "finite_diff_gradient",
    "no_grad",
    "MaskedFeature",
    "sparse_conv2d",
    "CameraIntrinsics",
    "PointCloud",
    "project",
    "backproject",
    "chamfer",
    "GaussianParams",
    "ModelConfig",
    "SparseDepthFrame",
    "FrameBatch",
    "VrnnModel",
    "VrnnState",
    "compose",
    "rollout",
    "save_checkpoint",
    "load_checkpoint",
    "LossBreakdown",
    "masked_l2",
    "kl_gauss",
    "depth_loss",
    "mask_loss",
    "SynthConfig",
    "Sequence",
    "synth_sequence",
    "synth_dataset",
    "load_depth_png",
    "save_depth_png",
    "load_sequences",
    "resize_nearest",
    "TrainConfig",
    "TrainReport",
    "EvalConfig",
    "AdamOptimizer",
    "train_next_frame",
    "train_joint_autoregressive",
    "evaluate",
    "SparseDepthForecaster",
]
