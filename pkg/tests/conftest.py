import math
import sys

import numpy as np
import pytest

from mapprior.geometry import CameraModel, PointCloud, Pose, camera_extrinsic, se3_exp
from mapprior.map_store import Sweep, build_map


def random_pose(rng, rot_scale=math.pi, trans_scale=10.0):
    return Pose.from_rotvec(rng.normal(size=3) * rot_scale / 2, rng.normal(size=3) * trans_scale)


def small_perturbation(rng, max_t=0.5, max_deg=5.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    angle = math.radians(max_deg) * rng.random()
    return Pose.from_rotvec(axis * angle, direction * max_t * rng.random())


def random_camera(rng, width=None, height=None):
    W = int(width or rng.integers(24, 160))
    H = int(height or rng.integers(24, 120))
    f = float(rng.uniform(0.4, 1.5) * W)
    ext = camera_extrinsic(rng.uniform(-math.pi, math.pi), rng.normal(size=3), rng.uniform(-0.2, 0.2))
    return CameraModel(f, f * rng.uniform(0.9, 1.1), rng.uniform(0.3, 0.7) * W, rng.uniform(0.3, 0.7) * H, W, H, ext)


def structured_scene(rng, n=5000, extent=20.0):
    """Ground plane plus box-shaped obstacles: enough relief to pin all six DoF."""
    n_ground = n * 2 // 5
    ground = np.column_stack([rng.uniform(-extent, extent, (n_ground, 2)), rng.normal(0, 0.02, n_ground)])
    parts = [ground]
    n_obj = 8
    per = (n - n_ground) // n_obj
    for k in range(n_obj):
        center = rng.uniform(-0.75 * extent, 0.75 * extent, 2)
        size = rng.uniform(1.0, 4.0, 3)
        p = rng.uniform(-0.5, 0.5, (per, 3)) * size
        face = rng.integers(0, 3, per)
        rows = np.arange(per)
        p[rows, face] = np.sign(p[rows, face]) * size[face] / 2
        p[:, :2] += center
        p[:, 2] += size[2] / 2
        parts.append(p)
    pts = np.concatenate(parts)
    extra = n - len(pts)
    if extra:
        pts = np.concatenate([pts, rng.uniform(-extent, extent, (extra, 3)) * [1, 1, 0.1]])
    return pts


def random_tiled_map(rng, n_points, n_traversals=5, tile_size=50.0, extent=300.0, sweeps_per_traversal=4):
    """Map built from random sweeps; traversal t spans days apart unless close_pairs."""
    sweeps = []
    per = n_points // (n_traversals * sweeps_per_traversal)
    for t in range(n_traversals):
        t0 = t * 86400.0 * rng.uniform(0.0, 2.0)
        for s in range(sweeps_per_traversal):
            pose = Pose.from_yaw(rng.uniform(-math.pi, math.pi), [*rng.uniform(-extent / 2, extent / 2, 2), 0.0])
            pts = np.column_stack([rng.uniform(-80, 80, (per, 2)), rng.uniform(-2, 5, per)])
            sweeps.append(Sweep(pose, PointCloud(pts), (), t, t0 + 600.0 * s))
    return build_map(sweeps, tile_size)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def pinhole():
    return CameraModel(100.0, 100.0, 320.0, 240.0, 640, 480)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
