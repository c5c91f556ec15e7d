"""Sparse BEV voxelization of the ego-frame patch.

Each occupied voxel carries the mean x, y, z of its member points in absolute
ego coordinates (``relative=True`` on :meth:`SparseVoxelGrid.features` gives
offsets from the voxel's minimum corner instead).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import PointCloud
from .map_store import group_means

DEFAULT_VOXEL_SIZE = 0.2
DEFAULT_BEV_RANGE = 50.0
DEFAULT_Z_BOUNDS = (-5.0, 3.0)
DEFAULT_BEV_CELLS = 128

_VOXEL_RECORD = np.dtype(
    [("ix", "<i4"), ("iy", "<i4"), ("iz", "<i4"), ("mx", "<f4"), ("my", "<f4"), ("mz", "<f4"), ("count", "<u4")]
)


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    voxel_size: float
    range: float
    z_bounds: tuple[float, float]
    indices: np.ndarray  # M×3 int64, sorted lexicographically by (ix, iy, iz)
    means: np.ndarray  # M×3 float64
    counts: np.ndarray  # M int64

    def __len__(self) -> int:
        return len(self.indices)

    def features(self, relative: bool = False) -> np.ndarray:
        if relative:
            return self.means - self.indices * self.voxel_size
        return self.means

    def header(self) -> dict:
        return {
            "format": "voxels",
            "voxel_size": self.voxel_size,
            "range": self.range,
            "z_bounds": list(self.z_bounds),
            "entries": len(self),
            "record": "<i4 ix, <i4 iy, <i4 iz, <f4 mean_x, <f4 mean_y, <f4 mean_z, <u4 count",
        }


def voxelize(
    patch_ego: PointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    range: float = DEFAULT_BEV_RANGE,
    z_bounds=DEFAULT_Z_BOUNDS,
) -> SparseVoxelGrid:
    """Crop to ``[-range, range)^2 x [z_min, z_max)`` and mean-pool per voxel."""
    zmin, zmax = float(z_bounds[0]), float(z_bounds[1])
    if not voxel_size > 0 or not range > 0:
        raise ValueError("voxel_size and range must be positive")
    if not zmin < zmax:
        raise ValueError("z_bounds must satisfy min < max")
    p = patch_ego.positions
    keep = (
        (p[:, 0] >= -range) & (p[:, 0] < range)
        & (p[:, 1] >= -range) & (p[:, 1] < range)
        & (p[:, 2] >= zmin) & (p[:, 2] < zmax)
    )
    p = p[keep]
    if len(p) == 0:
        return SparseVoxelGrid(float(voxel_size), float(range), (zmin, zmax),
                               np.zeros((0, 3), np.int64), np.zeros((0, 3)), np.zeros(0, np.int64))
    idx, means, counts = group_means(p, voxel_size)
    # Rounding can push a mean one ulp past its cell; pin it back inside.
    lo = idx * voxel_size
    hi = np.nextafter((idx + 1) * voxel_size, -np.inf)
    means = np.clip(means, lo, hi)
    return SparseVoxelGrid(float(voxel_size), float(range), (zmin, zmax), idx, means, counts.astype(np.int64))


def to_dense_bev(grid: SparseVoxelGrid, cells: int = DEFAULT_BEV_CELLS):
    """Pool voxel columns into a ``cells x cells`` grid indexed ``[iy, ix]``.

    Returns ``(occupancy, height)``: the number of voxels per cell and the max
    mean-z over them (0 for empty cells).  Cell edge is ``2 * range / cells``.
    """
    if cells < 1:
        raise ValueError("cells must be >= 1")
    occupancy = np.zeros((cells, cells), dtype=np.int64)
    height = np.full((cells, cells), -np.inf)
    if len(grid):
        edge = 2.0 * grid.range / cells
        centers = (grid.indices[:, :2] + 0.5) * grid.voxel_size
        c = np.floor((centers + grid.range) / edge).astype(np.int64)
        inside = np.all((c >= 0) & (c < cells), axis=1)
        cx, cy = c[inside, 0], c[inside, 1]
        np.add.at(occupancy, (cy, cx), 1)
        np.maximum.at(height, (cy, cx), grid.means[inside, 2])
    height[occupancy == 0] = 0.0
    return occupancy, height


def write_voxels(path, grid: SparseVoxelGrid, provenance: Optional[dict] = None) -> None:
    """One JSON header line, then little-endian fixed-size records in canonical order."""
    header = grid.header()
    if provenance is not None:
        header["config"] = provenance
    rec = np.empty(len(grid), dtype=_VOXEL_RECORD)
    rec["ix"], rec["iy"], rec["iz"] = grid.indices.T
    rec["mx"], rec["my"], rec["mz"] = grid.means.T
    rec["count"] = grid.counts
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(rec.tobytes())


def read_voxels(path) -> SparseVoxelGrid:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    rec = np.frombuffer(raw, dtype=_VOXEL_RECORD, offset=nl + 1)
    if len(rec) != header["entries"]:
        raise ValueError(f"{path}: {len(rec)} records, header says {header['entries']}")
    return SparseVoxelGrid(
        float(header["voxel_size"]),
        float(header["range"]),
        tuple(header["z_bounds"]),
        np.stack([rec["ix"], rec["iy"], rec["iz"]], axis=1).astype(np.int64),
        np.stack([rec["mx"], rec["my"], rec["mz"]], axis=1).astype(np.float64),
        rec["count"].astype(np.int64),
    )
