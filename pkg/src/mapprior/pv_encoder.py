"""Perspective-view map encoding.

For each camera the ego-frame map patch is z-buffered into a sparse depth
image and expanded into an ``H x W x (7 + E)`` float32 tensor with channels::

    [0]            d_norm       depth / d_max, clipped to [0, 1]
    [1]            mask         1 where at least one point landed
    [2, 2+E)       embedding    sin/cos pairs of d_norm
    [2+E, 5+E)     x, y, z      ego coordinates of the closest point / R
    [5+E]          d_near       d_norm of the nearest valid pixel closer than r
    [6+E]          delta_norm   distance to that pixel / r (1 if none)

Pixel ``(u, v)`` is stored at array row ``v``, column ``u``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from ._workers import max_workers
from .geometry import CameraModel, PointCloud

DEFAULT_D_MAX = 61.0
DEFAULT_D_MAX_LONG = 152.0
DEFAULT_SPREAD_RADIUS = 24
DEFAULT_EMBED_DIM = 16
OMEGA_MIN = math.pi
OMEGA_MAX = 1024 * math.pi


def channel_names(E: int) -> list[str]:
    return (
        ["d_norm", "mask"]
        + [f"embed_{'sin' if k % 2 == 0 else 'cos'}_{k // 2}" for k in range(E)]
        + ["x_norm", "y_norm", "z_norm", "d_near", "delta_norm"]
    )


class Raster(NamedTuple):
    d_norm: np.ndarray  # H×W float64
    mask: np.ndarray  # H×W bool
    xyz_norm: np.ndarray  # H×W×3 float64
    depth: np.ndarray  # H×W raw meters, 0 where invalid


def rasterize(cam: CameraModel, patch_ego: PointCloud, d_max: float = DEFAULT_D_MAX, R: float = 50.0) -> Raster:
    """Z-buffer the patch into the camera: keep the closest point per pixel.

    Among points at exactly equal depth the earliest in input order wins.
    """
    if not d_max > 0 or not R > 0:
        raise ValueError("d_max and R must be positive")
    H, W = cam.height, cam.width
    depth = np.zeros(H * W)
    mask = np.zeros(H * W, dtype=bool)
    xyz = np.zeros((H * W, 3))
    if len(patch_ego):
        u, v, z, valid = cam.project(patch_ego.positions)
        sel = np.flatnonzero(valid)
        pix = np.floor(v[sel]).astype(np.int64) * W + np.floor(u[sel]).astype(np.int64)
        zs = z[sel]
        order = np.lexsort((zs, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        win = order[first]
        wpix = pix[win]
        depth[wpix] = zs[win]
        mask[wpix] = True
        xyz[wpix] = np.clip(patch_ego.positions[sel[win]] / R, -1.0, 1.0)
    depth = depth.reshape(H, W)
    return Raster(
        np.clip(depth / d_max, 0.0, 1.0),
        mask.reshape(H, W),
        xyz.reshape(H, W, 3),
        depth,
    )


def embedding_frequencies(E: int) -> np.ndarray:
    """Geometric ladder from pi to 1024*pi with E/2 rungs."""
    if E < 2 or E % 2:
        raise ValueError(f"embedding size must be an even number >= 2, got {E}")
    half = E // 2
    if half == 1:
        return np.array([OMEGA_MIN])
    k = np.arange(half)
    return OMEGA_MIN * (OMEGA_MAX / OMEGA_MIN) ** (k / (half - 1))


def depth_embedding(d_norm, E: int = DEFAULT_EMBED_DIM) -> np.ndarray:
    """Interleaved ``(sin(w_k d), cos(w_k d))`` pairs; output shape ``d_norm.shape + (E,)``."""
    omega = embedding_frequencies(E)
    d = np.clip(np.asarray(d_norm, dtype=np.float64), 0.0, 1.0)
    phase = d[..., None] * omega
    out = np.empty(d.shape + (E,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def _offsets_by_distance(r: int) -> dict:
    """Map squared distance -> offsets (dv, du) in lexicographic order."""
    table: dict = {}
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            d2 = dv * dv + du * du
            if d2 < r * r:
                table.setdefault(d2, []).append((dv, du))
    return table


def nearest_valid_spread(d_norm: np.ndarray, mask: np.ndarray, r: int = DEFAULT_SPREAD_RADIUS):
    """Copy the nearest valid depth to each pixel closer than ``r``.

    Returns ``(d_near, delta_norm)``.  Pixels whose nearest valid pixel is at
    distance ``>= r`` get ``d_near = 0`` and ``delta_norm = 1``, so a delta of
    exactly 1 always means "no prior".  Exact squared distances come from a
    Euclidean distance transform; among equidistant valid pixels the one with
    the smallest ``(v, u)`` wins.
    """
    if r < 1:
        raise ValueError("spread radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    d_near = np.zeros((H, W))
    delta = np.ones((H, W))
    if not mask.any():
        return d_near, delta
    iv, iu = ndimage.distance_transform_edt(~mask, return_distances=False, return_indices=True)
    vv, uu = np.indices((H, W))
    d2 = (iv - vv) ** 2 + (iu - uu) ** 2
    within = d2 < r * r
    delta[within] = np.sqrt(d2[within].astype(np.float64)) / r

    # Resolve ties: for each distance, test offsets in (dv, du) order.
    src_v = np.full((H, W), -1, dtype=np.int64)
    src_u = np.full((H, W), -1, dtype=np.int64)
    src_v[mask], src_u[mask] = vv[mask], uu[mask]
    table = _offsets_by_distance(r)
    need = within & ~mask
    qv, qu = vv[need], uu[need]
    qd2 = d2[need]
    found_v = np.empty(len(qv), dtype=np.int64)
    found_u = np.empty(len(qv), dtype=np.int64)
    groups = np.argsort(qd2, kind="stable")
    bounds = np.searchsorted(qd2[groups], np.unique(qd2), side="left").tolist() + [len(groups)]
    for b0, b1 in zip(bounds[:-1], bounds[1:]):
        members = groups[b0:b1]
        pending = members
        for dv, du in table[int(qd2[members[0]])]:
            if len(pending) == 0:
                break
            pv, pu = qv[pending] + dv, qu[pending] + du
            ok = (pv >= 0) & (pv < H) & (pu >= 0) & (pu < W)
            hit = np.zeros(len(pending), dtype=bool)
            hit[ok] = mask[pv[ok], pu[ok]]
            found_v[pending[hit]] = pv[hit]
            found_u[pending[hit]] = pu[hit]
            pending = pending[~hit]
        assert len(pending) == 0, "distance transform and offset table disagree"
    src_v[need], src_u[need] = found_v, found_u
    d_near[within] = d_norm[src_v[within], src_u[within]]
    return d_near, delta


@dataclass(frozen=True)
class PVParams:
    d_max: float = DEFAULT_D_MAX
    R: float = 50.0
    r: int = DEFAULT_SPREAD_RADIUS
    E: int = DEFAULT_EMBED_DIM

    def __post_init__(self):
        if not (self.d_max > 0 and self.R > 0):
            raise ValueError("d_max and R must be positive")
        if int(self.r) < 1:
            raise ValueError("spread radius must be >= 1")
        if self.E < 2 or self.E % 2:
            raise ValueError("embedding size must be an even number >= 2")

    @property
    def channels(self) -> int:
        return 7 + self.E


@dataclass(frozen=True, eq=False)
class PVMapTensor:
    data: np.ndarray  # H×W×(7+E) float32
    d_max: float
    R: float
    r: int
    E: int
    camera: str = "cam"

    @property
    def shape(self):
        return self.data.shape

    @property
    def channel_names(self) -> list[str]:
        return channel_names(self.E)

    # Channel views.
    @property
    def d_norm(self):
        return self.data[..., 0]

    @property
    def mask(self):
        return self.data[..., 1]

    @property
    def embedding(self):
        return self.data[..., 2:2 + self.E]

    @property
    def xyz_norm(self):
        return self.data[..., 2 + self.E:5 + self.E]

    @property
    def d_near(self):
        return self.data[..., 5 + self.E]

    @property
    def delta_norm(self):
        return self.data[..., 6 + self.E]

    def replace(self, data: np.ndarray) -> "PVMapTensor":
        return PVMapTensor(data, self.d_max, self.R, self.r, self.E, self.camera)

    def header(self) -> dict:
        H, W, C = self.data.shape
        return {
            "format": "pvmap",
            "shape": [H, W, C],
            "channels": self.channel_names,
            "dtype": "<f4",
            "order": "HWC",
            "d_max": self.d_max,
            "R": self.R,
            "r": self.r,
            "E": self.E,
            "camera": self.camera,
        }


def assemble(cam: CameraModel, patch_ego: PointCloud, params: PVParams = PVParams()) -> PVMapTensor:
    ras = rasterize(cam, patch_ego, params.d_max, params.R)
    E = params.E
    out = np.zeros((cam.height, cam.width, 7 + E), dtype=np.float32)
    m = ras.mask
    out[..., 0] = ras.d_norm
    out[..., 1] = m
    out[m, 2:2 + E] = depth_embedding(ras.d_norm[m], E)
    out[..., 2 + E:5 + E] = ras.xyz_norm
    d_near, delta = nearest_valid_spread(ras.d_norm, m, int(params.r))
    out[..., 5 + E] = d_near
    out[..., 6 + E] = delta
    return PVMapTensor(out, float(params.d_max), float(params.R), int(params.r), E, cam.name)


def assemble_rig(
    cams: Sequence[CameraModel], patch_ego: PointCloud, params: PVParams = PVParams(), workers: Optional[int] = None
) -> list[PVMapTensor]:
    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        return list(pool.map(lambda c: assemble(c, patch_ego, params), cams))


def rasterize_rig(
    cams: Sequence[CameraModel], patch_ego: PointCloud, d_max: float, R: float, workers: Optional[int] = None
) -> list[Raster]:
    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        return list(pool.map(lambda c: rasterize(c, patch_ego, d_max, R), cams))


# --- tensor container ---------------------------------------------------------
#
# One line of JSON header terminated by "\n", then raw little-endian float32
# in row-major (H, W, C) order.


def write_tensor(path, t: PVMapTensor, provenance: Optional[dict] = None) -> None:
    header = t.header()
    if provenance is not None:
        header["config"] = provenance
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def read_tensor_header(path) -> dict:
    with open(path, "rb") as f:
        return json.loads(f.readline())


def read_tensor(path) -> PVMapTensor:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    H, W, C = header["shape"]
    data = np.frombuffer(raw, dtype="<f4", offset=nl + 1)
    if data.size != H * W * C:
        raise ValueError(f"{path}: payload has {data.size} values, header says {H * W * C}")
    return PVMapTensor(
        data.reshape(H, W, C).astype(np.float32),
        float(header["d_max"]),
        float(header["R"]),
        int(header["r"]),
        int(header["E"]),
        str(header.get("camera", "cam")),
    )
