"""Pinhole cameras, rigid world-to-camera poses, and plane-sweep warp grids.

Pixel convention used everywhere: coordinate (x, y) addresses the center of
pixel (col=x, row=y); grids are in absolute pixel units of the target view,
never normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics at a 1/factor feature resolution (fx,fy,cx,cy divided)."""
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
        )

    def backproject(self, pixels: np.ndarray, depth) -> np.ndarray:
        """Lift pixels [...,2] at z-depth `depth` to camera-frame points [...,3]."""
        pixels = np.asarray(pixels, dtype=np.float64)
        depth = np.asarray(depth, dtype=np.float64)
        x = (pixels[..., 0] - self.cx) / self.fx * depth
        y = (pixels[..., 1] - self.cy) / self.fy * depth
        z = np.broadcast_to(depth, x.shape)
        return np.stack([x, y, z], axis=-1)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project camera-frame points [...,3]; returns (pixels [...,2], z>0 mask)."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        in_front = z > 0
        safe_z = np.where(in_front, z, 1.0)
        u = self.fx * points[..., 0] / safe_z + self.cx
        v = self.fy * points[..., 1] / safe_z + self.cy
        return np.stack([u, v], axis=-1), in_front


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera SE(3) transform: X_cam = R @ X_world + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ContractError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ContractError(f"rotation determinant {np.linalg.det(R)} != 1")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self ∘ other)(X) = self(other(X))."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


def relative_pose(pose_i: RigidPose, pose_j: RigidPose) -> RigidPose:
    """T_{j<-i}: maps view-i camera coordinates into view-j camera coordinates."""
    return pose_j.compose(pose_i.inverse())


@dataclass(frozen=True)
class DepthHypothesisSet:
    """Candidate depth planes, uniform in inverse depth, far-to-near order."""

    depths: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float64))

    def __len__(self) -> int:
        return len(self.depths)

    def nearest_index(self, depth) -> np.ndarray:
        """Index of the candidate closest to each query depth."""
        return np.abs(self.depths[:, None] - np.ravel(depth)).argmin(axis=0).reshape(
            np.shape(depth)
        )


def make_depth_hypotheses(count: int, d_min: float, d_max: float) -> DepthHypothesisSet:
    """`count` planes with inverse depths uniformly spanning [1/d_max, 1/d_min]."""
    if count < 2:
        raise DomainError(f"need at least 2 depth candidates, got {count}")
    if not (0 < d_min < d_max):
        raise DomainError(f"invalid depth range [{d_min}, {d_max}]")
    inv = np.linspace(1.0 / d_max, 1.0 / d_min, count)
    return DepthHypothesisSet(depths=1.0 / inv, d_min=d_min, d_max=d_max)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Dense (x, y) coordinates of all pixel centers, shape [H,W,2]."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys], axis=-1).astype(np.float64)


def warp_grid(
    intr_i: CameraIntrinsics,
    intr_j: CameraIntrinsics,
    rel: RigidPose,
    depth: float,
    grid_shape: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Plane-sweep correspondence grid for one depth hypothesis.

    For every view-i pixel, back-projects it at z-depth `depth` through
    intr_i, maps the point into view j with `rel` (= T_{j<-i}) and projects
    through intr_j.  Returns (grid [H',W',2] of view-j pixel coordinates,
    mask [H',W'] false where the point is behind view j or outside it).
    """
    if depth <= 0:
        raise DomainError(f"depth hypothesis must be positive, got {depth}")
    h, w = grid_shape
    pts = intr_i.backproject(pixel_grid(h, w), float(depth))
    pts_j = rel.transform(pts)
    grid, in_front = intr_j.project(pts_j)
    inside = (
        (grid[..., 0] >= 0)
        & (grid[..., 0] <= intr_j.width - 1)
        & (grid[..., 1] >= 0)
        & (grid[..., 1] <= intr_j.height - 1)
    )
    return grid, in_front & inside
