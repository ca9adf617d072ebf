"""Multi-view training/evaluation samples and the view-duplication strategy."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .costvolume import ViewCamera
from .errors import ContractError

TASK_NAMES = ("segmentation", "depth", "normal", "boundary", "saliency", "parts")


@dataclass
class MultiViewSample:
    """V images with cameras plus per-view ground truth for labeled tasks.

    Ground-truth arrays are indexed per view; tasks absent from `task_mask`
    contribute no loss and no metrics.  Depth is z-depth in meters, normals
    are unit vectors in the camera frame, labels are integer class ids.
    """

    images: np.ndarray  # [V,3,H,W] in [0,1]
    cameras: list[ViewCamera]
    depth: np.ndarray | None = None  # [V,H,W]
    normals: np.ndarray | None = None  # [V,3,H,W]
    labels: np.ndarray | None = None  # [V,H,W] int
    boundary: np.ndarray | None = None  # [V,H,W] bool
    saliency: np.ndarray | None = None  # [V,H,W] bool
    task_mask: dict[str, bool] = field(default_factory=dict)
    # which views carry supervision (duplicated copies default to unsupervised)
    supervised_views: list[int] | None = None
    sample_id: str = ""

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]

    def has_task(self, name: str) -> bool:
        return bool(self.task_mask.get(name, False))


def duplicate_view(sample: MultiViewSample, supervise_copy: bool = False) -> MultiViewSample:
    """Turn a single-view sample into a two-view one by copying the view.

    The copy shares the camera (identity relative pose, identical
    intrinsics).  By default only the original view is supervised; pass
    supervise_copy=True to attach targets to both.
    """
    if sample.num_views != 1:
        raise ContractError(f"duplicate_view needs a single-view sample, got V={sample.num_views}")

    def dup(arr):
        return None if arr is None else np.concatenate([arr, arr], axis=0)

    return replace(
        sample,
        images=dup(sample.images),
        cameras=[sample.cameras[0], sample.cameras[0]],
        depth=dup(sample.depth),
        normals=dup(sample.normals),
        labels=dup(sample.labels),
        boundary=dup(sample.boundary),
        saliency=dup(sample.saliency),
        supervised_views=[0, 1] if supervise_copy else [0],
    )
