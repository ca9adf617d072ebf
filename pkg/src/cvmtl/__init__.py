"""Cross-view geometric consistency for multi-task dense prediction.

A desk-scale, fully deterministic implementation: a tape-based autodiff
engine, pinhole/plane-sweep geometry, a multi-view window-attention
feature pathway, a differentiable cost volume, a toy multi-task network
with trainer, the full evaluation-metric suite, synthetic scenes with
exact ground truth, and file I/O (manifests, COLMAP text models, PFM/PNG).
"""

from .estimator import CrossViewMultiTaskEstimator
from .geometry import (
    CameraIntrinsics,
    DepthHypothesisSet,
    RigidPose,
    make_depth_hypotheses,
    relative_pose,
)
from .metrics import MetricReport, delta_mtl
from .model import ModelConfig, MultiTaskNet
from .samples import MultiViewSample, duplicate_view
from .training import TrainConfig, evaluate, infer, train

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CrossViewMultiTaskEstimator",
    "DepthHypothesisSet",
    "MetricReport",
    "ModelConfig",
    "MultiTaskNet",
    "MultiViewSample",
    "RigidPose",
    "TrainConfig",
    "delta_mtl",
    "duplicate_view",
    "evaluate",
    "infer",
    "make_depth_hypotheses",
    "relative_pose",
    "train",
    "__version__",
]
