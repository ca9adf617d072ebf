import numpy as np
import pytest

from cvmtl.errors import ContractError, DomainError
from cvmtl.geometry import (
    CameraIntrinsics,
    RigidPose,
    make_depth_hypotheses,
    pixel_grid,
    relative_pose,
    warp_grid,
)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng, translation_scale=0.5):
    return RigidPose(random_rotation(rng), rng.normal(scale=translation_scale, size=3))


INTR = CameraIntrinsics(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64)


# -- depth hypotheses ------------------------------------------------------------


def test_hypotheses_match_published_range():
    hyp = make_depth_hypotheses(128, 0.0001, 10.0)
    assert len(hyp) == 128
    assert hyp.depths[0] == pytest.approx(10.0)
    assert hyp.depths[-1] == pytest.approx(0.0001)


def test_hypotheses_two_endpoints():
    with pytest.raises(DomainError):
        make_depth_hypotheses(2, 1.0, 1.0)
    hyp = make_depth_hypotheses(2, 1.0, 2.0)
    assert np.allclose(hyp.depths, [2.0, 1.0])


def test_hypotheses_inverse_uniform_three():
    hyp = make_depth_hypotheses(3, 0.5, 1.0)
    assert np.allclose(1.0 / hyp.depths, [1.0, 1.5, 2.0])
    assert np.allclose(hyp.depths, [1.0, 2.0 / 3.0, 0.5])


def test_hypotheses_inverse_spacing_constant(rng):
    for _ in range(10):
        d_min = rng.uniform(0.05, 1.0)
        d_max = d_min + rng.uniform(0.5, 20.0)
        hyp = make_depth_hypotheses(int(rng.integers(3, 200)), d_min, d_max)
        inv = 1.0 / hyp.depths
        diffs = np.diff(inv)
        assert np.abs(diffs - diffs[0]).max() < 1e-12
        assert (hyp.depths >= d_min - 1e-12).all() and (hyp.depths <= d_max + 1e-12).all()
        assert (np.diff(hyp.depths) < 0).all()  # far-to-near ordering


def test_hypotheses_domain_errors():
    with pytest.raises(DomainError):
        make_depth_hypotheses(1, 0.1, 1.0)
    with pytest.raises(DomainError):
        make_depth_hypotheses(8, -1.0, 1.0)
    with pytest.raises(DomainError):
        make_depth_hypotheses(8, 2.0, 1.0)


# -- poses ----------------------------------------------------------------------


def test_relative_pose_self_is_identity(rng):
    p = random_pose(rng)
    rel = relative_pose(p, p)
    assert np.allclose(rel.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(rel.translation, 0.0, atol=1e-12)


def test_relative_pose_identity_to_translation():
    p_i = RigidPose.identity()
    p_j = RigidPose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    rel = relative_pose(p_i, p_j)
    assert np.allclose(rel.rotation, np.eye(3))
    assert np.allclose(rel.translation, [1.0, 0.0, 0.0])


def test_relative_pose_inverse_composition(rng):
    for _ in range(20):
        p_i, p_j = random_pose(rng), random_pose(rng)
        ab = relative_pose(p_i, p_j).compose(relative_pose(p_j, p_i))
        assert np.abs(ab.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(ab.translation).max() < 1e-9


def test_pose_composition_associative(rng):
    a, b, c = (random_pose(rng) for _ in range(3))
    left = a.compose(b).compose(c)
    right = a.compose(b.compose(c))
    assert np.abs(left.rotation - right.rotation).max() < 1e-9
    assert np.abs(left.translation - right.translation).max() < 1e-9


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ContractError):
        RigidPose(np.eye(3) * 2.0, np.zeros(3))
    with pytest.raises(ContractError):
        RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # det = -1


def test_camera_center():
    pose = RigidPose(np.eye(3), np.array([1.0, 2.0, 3.0]))
    assert np.allclose(pose.camera_center, [-1.0, -2.0, -3.0])


# -- projection round trips ------------------------------------------------------


def test_project_backproject_round_trip(rng):
    pix = pixel_grid(16, 24)
    for depth in (0.3, 1.0, 7.7):
        pts = INTR.backproject(pix, depth)
        back, in_front = INTR.project(pts)
        assert in_front.all()
        assert np.abs(back - pix).max() < 1e-9


def test_intrinsics_validation():
    with pytest.raises(DomainError):
        CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(DomainError):
        CameraIntrinsics(fx=1.0, fy=1.0, cx=9.0, cy=0.0, width=4, height=4)


def test_intrinsics_scaled_divides_by_factor():
    s = INTR.scaled(8)
    assert (s.fx, s.fy, s.cx, s.cy) == (12.5, 12.5, 4.0, 4.0)
    assert (s.width, s.height) == (8, 8)


# -- warp grids -------------------------------------------------------------------


def test_warp_grid_identity_pose_is_identity():
    grid, mask = warp_grid(INTR, INTR, RigidPose.identity(), depth=3.0, grid_shape=(64, 64))
    assert np.abs(grid - pixel_grid(64, 64)).max() < 1e-9
    assert mask.all()


def test_warp_grid_rectified_stereo_shift():
    rel = RigidPose(np.eye(3), np.array([0.2, 0.0, 0.0]))
    grid, _ = warp_grid(INTR, INTR, rel, depth=2.0, grid_shape=(64, 64))
    shift = grid - pixel_grid(64, 64)
    assert np.abs(shift[..., 0] - 100.0 * 0.2 / 2.0).max() < 1e-9  # fx*b/d = 10 px
    assert np.abs(shift[..., 1]).max() < 1e-9


def test_warp_grid_rejects_nonpositive_depth():
    with pytest.raises(DomainError):
        warp_grid(INTR, INTR, RigidPose.identity(), depth=0.0, grid_shape=(8, 8))


def test_warp_grid_epipolar_collinearity(rng):
    """Plane-sweep traces of a fixed pixel are collinear in the other view."""
    hyp = make_depth_hypotheses(16, 0.5, 20.0)
    for _ in range(100):
        pose_i, pose_j = random_pose(rng, 0.3), random_pose(rng, 0.3)
        rel = relative_pose(pose_i, pose_j)
        points = []
        for d in hyp.depths:
            grid, _ = warp_grid(INTR, INTR, rel, float(d), (4, 4))
            points.append(grid[1, 2])
        pts = np.array(points)
        centered = pts - pts.mean(axis=0)
        # max point-to-line distance via the smallest principal direction
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        residual = np.abs(centered @ vt[-1])
        assert residual.max() < 1e-6


def test_warp_grid_mask_false_behind_camera():
    # neighbor camera rotated 180 degrees: everything lands behind it
    rot = np.diag([1.0, -1.0, -1.0])
    rel = RigidPose(rot, np.zeros(3))
    _, mask = warp_grid(INTR, INTR, rel, depth=2.0, grid_shape=(8, 8))
    assert not mask.any()
