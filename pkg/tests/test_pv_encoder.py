import math

import numpy as np
import pytest

import oracles
from conftest import random_camera
from mapprior.geometry import CameraModel, PointCloud, Pose, invert
from mapprior.pv_encoder import (
    PVParams,
    assemble,
    assemble_rig,
    channel_names,
    depth_embedding,
    embedding_frequencies,
    nearest_valid_spread,
    rasterize,
    read_tensor,
    read_tensor_header,
    write_tensor,
)


def points_in_view(rng, cam, n, spill=0.2):
    """Points mostly inside the camera frustum, expressed in the ego frame."""
    z = rng.uniform(0.5, 60.0, n)
    u = rng.uniform(-spill * cam.width, (1 + spill) * cam.width, n)
    v = rng.uniform(-spill * cam.height, (1 + spill) * cam.height, n)
    pc = np.column_stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    behind = rng.random(n) < 0.05
    pc[behind, 2] *= -1
    return invert(cam.extrinsic).apply(pc)


class TestRasterize:
    def test_closest_depth_wins(self, pinhole):
        pts = PointCloud([[0.0, 0.0, 5.0], [0.0, 0.0, 3.0]])
        ras = rasterize(pinhole, pts, 50.0, 50.0)
        assert ras.depth[240, 320] == 3.0
        assert ras.mask.sum() == 1

    def test_empty_patch(self, pinhole):
        ras = rasterize(pinhole, PointCloud.empty(), 50.0, 50.0)
        assert not ras.mask.any() and not ras.d_norm.any() and not ras.xyz_norm.any()

    def test_principal_axis_values(self, pinhole):
        ras = rasterize(pinhole, PointCloud([[0.0, 0.0, 10.0]]), 50.0, 50.0)
        assert ras.d_norm[240, 320] == pytest.approx(0.2, abs=1e-15)
        np.testing.assert_allclose(ras.xyz_norm[240, 320], [0.0, 0.0, 0.2], atol=1e-15)

    def test_xyz_comes_from_winning_point(self, pinhole):
        pts = PointCloud([[0.01, 0.01, 20.0], [0.001, 0.001, 4.0]])
        ras = rasterize(pinhole, pts, 50.0, 10.0)
        np.testing.assert_allclose(ras.xyz_norm[240, 320], [0.0001, 0.0001, 0.4])

    def test_clipping(self, pinhole):
        ras = rasterize(pinhole, PointCloud([[0.0, 0.0, 100.0]]), 50.0, 50.0)
        assert ras.d_norm[240, 320] == 1.0
        np.testing.assert_array_equal(ras.xyz_norm[240, 320], [0.0, 0.0, 1.0])
        assert ras.depth[240, 320] == 100.0

    def test_floor_discretization(self, pinhole):
        # u = 320 + 100 * 0.0999/10 = 320.999 -> column 320
        ras = rasterize(pinhole, PointCloud([[0.0999, -0.001, 10.0]]), 50.0, 50.0)
        assert ras.mask[239, 320]

    def test_matches_bruteforce_zbuffer(self, rng):
        for _ in range(20):
            cam = random_camera(rng)
            pts = points_in_view(rng, cam, int(rng.integers(1, 3000)))
            ras = rasterize(cam, PointCloud(pts), 61.0, 50.0)
            best, hits = oracles.zbuffer(cam, pts)
            expect_mask = np.zeros((cam.height, cam.width), bool)
            for (v, u), (z, i) in best.items():
                expect_mask[v, u] = True
                assert ras.depth[v, u] == z
                np.testing.assert_array_equal(ras.xyz_norm[v, u], np.clip(pts[i] / 50.0, -1, 1))
            np.testing.assert_array_equal(ras.mask, expect_mask)
            assert not ras.depth[~expect_mask].any()

    def test_monotone_occlusion(self, rng):
        cam = random_camera(rng, 64, 48)
        pts = points_in_view(rng, cam, 500)
        base = rasterize(cam, PointCloud(pts), 61.0, 50.0)
        extra = points_in_view(rng, cam, 200)
        more = rasterize(cam, PointCloud(np.vstack([pts, extra])), 61.0, 50.0)
        assert np.all(more.depth[base.mask] <= base.depth[base.mask])

    def test_invalid_params(self, pinhole):
        with pytest.raises(ValueError):
            rasterize(pinhole, PointCloud.empty(), 0.0, 1.0)


class TestDepthEmbedding:
    def test_zero(self):
        np.testing.assert_array_equal(depth_embedding(0.0, 8), [0, 1, 0, 1, 0, 1, 0, 1])

    def test_range(self, rng):
        e = depth_embedding(rng.uniform(-0.5, 1.5, 1000), 16)
        assert e.shape == (1000, 16)
        assert np.all(np.abs(e) <= 1.0)

    def test_half_e4_against_formula(self):
        # omega_k = pi * 1024^(k / (E/2 - 1)): pi and 1024 pi for E = 4
        expected = [math.sin(math.pi * 0.5), math.cos(math.pi * 0.5),
                     math.sin(1024 * math.pi * 0.5), math.cos(1024 * math.pi * 0.5)]
        np.testing.assert_allclose(depth_embedding(0.5, 4), expected, atol=1e-12)

    def test_frequencies_geometric(self):
        w = embedding_frequencies(16)
        assert w[0] == pytest.approx(math.pi) and w[-1] == pytest.approx(1024 * math.pi)
        np.testing.assert_allclose(w[1:] / w[:-1], (1024.0) ** (1 / 7))
        assert embedding_frequencies(2).tolist() == [math.pi]

    def test_clips_input(self):
        np.testing.assert_array_equal(depth_embedding(2.0, 4), depth_embedding(1.0, 4))

    @pytest.mark.parametrize("E", [0, 3, -2])
    def test_rejects_bad_size(self, E):
        with pytest.raises(ValueError):
            depth_embedding(0.5, E)


class TestSpread:
    def test_three_four_five(self):
        d = np.zeros((32, 32))
        m = np.zeros((32, 32), bool)
        d[10, 10], m[10, 10] = 0.5, True
        near, delta = nearest_valid_spread(d, m, 8)
        assert near[14, 13] == 0.5 and delta[14, 13] == 0.625
        assert near[10, 10] == 0.5 and delta[10, 10] == 0.0
        assert near[10, 19] == 0.0 and delta[10, 19] == 1.0  # distance 9 > r
        assert near[10, 18] == 0.0 and delta[10, 18] == 1.0  # distance exactly r: no prior
        assert near[10, 17] == 0.5 and delta[10, 17] == 7 / 8

    def test_all_invalid(self):
        near, delta = nearest_valid_spread(np.zeros((8, 9)), np.zeros((8, 9), bool), 3)
        assert not near.any() and np.all(delta == 1.0)

    def test_tie_prefers_smallest_v_then_u(self):
        d = np.zeros((9, 9))
        m = np.zeros((9, 9), bool)
        for (v, u), val in {(2, 4): 0.1, (4, 2): 0.2, (4, 6): 0.3, (6, 4): 0.4}.items():
            d[v, u], m[v, u] = val, True
        near, delta = nearest_valid_spread(d, m, 3)
        assert near[4, 4] == 0.1 and delta[4, 4] == 2 / 3
        assert near[4, 4] == oracles.nearest_valid(d, m, 3)[0][4, 4]
        m[2, 4] = False
        near, _ = nearest_valid_spread(d, m, 3)
        assert near[4, 4] == 0.2

    def test_matches_bruteforce(self, rng):
        for r in (1, 3, 8):
            for _ in range(6):
                m = rng.random((24, 28)) < rng.uniform(0.005, 0.1)
                d = rng.random((24, 28)) * m
                np.testing.assert_array_equal(nearest_valid_spread(d, m, r), oracles.nearest_valid(d, m, r))

    def test_invalid_radius(self):
        with pytest.raises(ValueError):
            nearest_valid_spread(np.zeros((2, 2)), np.zeros((2, 2), bool), 0)


class TestAssemble:
    def test_channel_count(self, pinhole):
        t = assemble(pinhole, PointCloud.empty(), PVParams(50.0, 50.0, 8, 16))
        assert t.data.shape == (480, 640, 23)
        assert len(t.channel_names) == 23
        assert t.data.dtype == np.float32

    def test_empty_patch(self, pinhole):
        t = assemble(pinhole, PointCloud.empty(), PVParams(50.0, 50.0, 8, 4))
        assert np.all(t.delta_norm == 1.0)
        others = np.delete(t.data, 6 + 4, axis=2)
        assert not others.any()

    def test_invariants(self, rng):
        cam = random_camera(rng, 96, 64)
        t = assemble(cam, PointCloud(points_in_view(rng, cam, 400)), PVParams(61.0, 50.0, 6, 8))
        mask = t.mask
        assert set(np.unique(mask)) <= {0.0, 1.0}
        off = mask == 0
        assert not t.d_norm[off].any() and not t.embedding[off].any() and not t.xyz_norm[off].any()
        assert t.d_norm.min() >= 0 and t.d_norm.max() <= 1
        assert t.delta_norm.min() >= 0 and t.delta_norm.max() <= 1
        assert np.abs(t.embedding).max() <= 1
        assert not t.d_near[t.delta_norm == 1].any()

    def test_recomposition(self, rng):
        cam = random_camera(rng, 80, 60)
        pts = PointCloud(points_in_view(rng, cam, 600))
        p = PVParams(61.0, 50.0, 5, 6)
        t = assemble(cam, pts, p)
        ras = rasterize(cam, pts, p.d_max, p.R)
        m = ras.mask
        emb = np.zeros((60, 80, 6))
        emb[m] = depth_embedding(ras.d_norm[m], 6)
        expected = np.concatenate([ras.d_norm[..., None], m[..., None], emb, ras.xyz_norm], axis=2).astype(np.float32)
        np.testing.assert_array_equal(t.data[..., :2 + 6 + 3], expected)
        near, delta = nearest_valid_spread(ras.d_norm, m, 5)
        np.testing.assert_array_equal(t.d_near, near.astype(np.float32))
        np.testing.assert_array_equal(t.delta_norm, delta.astype(np.float32))

    def test_deterministic_and_rig_matches_single(self, rng):
        cams = [random_camera(rng, 48, 40) for _ in range(3)]
        pts = PointCloud(points_in_view(rng, cams[0], 300))
        rig = assemble_rig(cams, pts, PVParams(61.0, 50.0, 4, 4), workers=3)
        for cam, t in zip(cams, rig):
            assert t.data.tobytes() == assemble(cam, pts, PVParams(61.0, 50.0, 4, 4)).data.tobytes()

    def test_params_validation(self):
        with pytest.raises(ValueError):
            PVParams(E=5)
        with pytest.raises(ValueError):
            PVParams(r=0)


def test_tensor_file_round_trip(tmp_path, rng):
    cam = random_camera(rng, 32, 24)
    t = assemble(cam, PointCloud(points_in_view(rng, cam, 100)), PVParams(61.0, 50.0, 4, 4))
    write_tensor(tmp_path / "x.pvt", t, provenance={"seed": 3})
    header = read_tensor_header(tmp_path / "x.pvt")
    assert header["shape"] == [24, 32, 11]
    assert header["channels"] == channel_names(4)
    assert header["config"] == {"seed": 3}
    for key in ("d_max", "R", "r", "E", "camera"):
        assert key in header
    back = read_tensor(tmp_path / "x.pvt")
    assert back.data.tobytes() == t.data.tobytes()
    raw = (tmp_path / "x.pvt").read_bytes()
    assert raw.endswith(t.data.astype("<f4").tobytes())
