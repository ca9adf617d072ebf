"""Differentiable plane-sweep cost volume over cross-view features.

For each reference view the features of every neighbor are warped onto L
hypothesized depth planes and matched by channel dot products scaled by
1/sqrt(K).  Scores are kept per depth candidate (L channels per view); the
printed formula's depth summation is available behind `sum_over_depth` but
is not the default.  This module owns rescaling full-resolution intrinsics
to the feature grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ContractError, DimensionError
from .geometry import CameraIntrinsics, DepthHypothesisSet, RigidPose, relative_pose, warp_grid


@dataclass(frozen=True)
class ViewCamera:
    """Full-resolution intrinsics and world-to-camera pose of one view."""

    intrinsics: CameraIntrinsics
    pose: RigidPose


@dataclass
class WarpedFeatureStack:
    """Neighbor features resampled onto each depth plane of the reference view."""

    features: Tensor  # [L,C,H',W'], zeros where mask is false
    mask: np.ndarray  # [L,H',W'] bool


@dataclass
class CostVolume:
    values: Tensor  # [V,L,H',W']
    validity: np.ndarray  # [V,H',W'], fraction of in-bounds warped samples

    @property
    def num_views(self) -> int:
        return self.values.shape[0]

    @property
    def num_depths(self) -> int:
        return self.values.shape[1]


def warp_features(
    feat_j: Tensor,
    intr_i: CameraIntrinsics,
    intr_j: CameraIntrinsics,
    rel: RigidPose,
    hyp: DepthHypothesisSet,
) -> WarpedFeatureStack:
    """Warp feat_j[C,H',W'] into the reference view for every depth candidate.

    Intrinsics must already be scaled to the feature resolution.
    """
    if len(hyp) == 0:
        raise ContractError("empty depth hypothesis set")
    c, h, w = feat_j.shape
    if intr_i.cx > w or intr_j.cx > w:
        raise ContractError(
            f"intrinsics look unscaled (cx={max(intr_i.cx, intr_j.cx)} on a {w}-wide grid); "
            "divide them by the feature downsample factor"
        )
    slices, masks = [], []
    for depth in hyp.depths:
        grid, gmask = warp_grid(intr_i, intr_j, rel, float(depth), (h, w))
        sampled, smask = ad.bilinear_sample(feat_j, grid)
        mask = gmask & smask
        slices.append(sampled * mask.astype(np.float64))
        masks.append(mask)
    return WarpedFeatureStack(
        features=ad.stack(slices, axis=0), mask=np.stack(masks, axis=0)
    )


def build_cost_volume(
    feats,
    cameras: list[ViewCamera],
    hyp: DepthHypothesisSet,
    sum_over_depth: bool = False,
) -> CostVolume:
    """Per-view, per-depth correlation scores between views.

    `feats` is the [V,C,H',W'] tensor (or CrossViewFeatures) of enhanced
    features; `cameras` carry full-resolution intrinsics, rescaled here.
    cost[i,d,p] = mean_{j != i} <F_i[p], warp(F_j, d)[p]> / sqrt(C); the
    neighbor/depth loops run in ascending order for determinism.
    """
    maps = feats.maps if hasattr(feats, "maps") else feats
    if maps.ndim != 4:
        raise DimensionError(f"expected [V,C,H',W'] features, got {maps.shape}")
    v, k, h, w = maps.shape
    if v < 2:
        raise ContractError("cost volume needs V >= 2; duplicate the single view upstream")
    if len(cameras) != v:
        raise DimensionError(f"{v} feature views but {len(cameras)} cameras")

    factor = cameras[0].intrinsics.width // w
    scaled = [cam.intrinsics.scaled(factor) if factor > 1 else cam.intrinsics
              for cam in cameras]

    inv_sqrt_k = 1.0 / np.sqrt(k)
    per_view, per_view_validity = [], []
    for i in range(v):
        acc = None
        masks = []
        for j in range(v):
            if j == i:
                continue
            rel = relative_pose(cameras[i].pose, cameras[j].pose)
            stack = warp_features(maps[j], scaled[i], scaled[j], rel, hyp)
            # [L,C,H,W] * [1,C,H,W] summed over channels -> [L,H,W]
            corr = ad.tsum(stack.features * ad.reshape(maps[i], (1, k, h, w)), axis=1)
            acc = corr if acc is None else acc + corr
            masks.append(stack.mask)
        cost_i = acc * (inv_sqrt_k / (v - 1))
        if sum_over_depth:
            cost_i = ad.tsum(cost_i, axis=0, keepdims=True)
        per_view.append(cost_i)
        per_view_validity.append(np.mean(masks, axis=(0, 1)))

    return CostVolume(
        values=ad.stack(per_view, axis=0),
        validity=np.stack(per_view_validity, axis=0),
    )


def raw_patch_features(image, factor: int = 8) -> Tensor:
    """Space-to-depth image patches as stand-in features (geometry sanity path)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    c, h, w = data.shape
    if h % factor or w % factor:
        raise DimensionError(f"image extents {h}x{w} not divisible by {factor}")
    blocks = data.reshape(c, h // factor, factor, w // factor, factor)
    return Tensor(blocks.transpose(0, 2, 4, 1, 3).reshape(c * factor * factor, h // factor, w // factor))


_DUMP_HEADER = struct.Struct("<4q")


def dump_cost_volume(volume: CostVolume, path) -> None:
    """Binary dump: header {V,L,H',W'} as int64 then row-major doubles."""
    vals = np.ascontiguousarray(volume.values.data, dtype=np.float64)
    with open(Path(path), "wb") as f:
        f.write(_DUMP_HEADER.pack(*vals.shape))
        f.write(vals.tobytes())


def load_cost_volume_dump(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _DUMP_HEADER.size:
        raise CheckpointError(f"{path}: truncated cost volume dump")
    shape = _DUMP_HEADER.unpack_from(blob)
    n = int(np.prod(shape))
    if len(blob) != _DUMP_HEADER.size + 8 * n:
        raise CheckpointError(f"{path}: dump size does not match header {shape}")
    return np.frombuffer(blob, dtype="<f8", offset=_DUMP_HEADER.size).reshape(shape).copy()
