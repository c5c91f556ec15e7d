"""Tiled static map: offline construction and online patch retrieval.

Points live in half-open square tiles ``[i*L, (i+1)*L) x [j*L, (j+1)*L)`` of
the global frame.  Retrieval only visits tiles overlapping the query square.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from ._workers import max_workers
from .geometry import Pose, PointCloud, invert, transform_points

log = logging.getLogger(__name__)

DEFAULT_TILE_SIZE = 50.0
DEFAULT_DYNAMIC_MARGIN = 0.1
DEFAULT_SOR_K = 20
DEFAULT_SOR_STD_RATIO = 2.0
DEFAULT_POOL_VOXEL = 0.4
DEFAULT_EXCLUSION_WINDOW = 3600.0

TILE_MAGIC = b"MPTL"
TILE_VERSION = 1
NO_TRAVERSAL = 0xFFFFFFFF  # u32 sentinel for points without a traversal id
_TILE_HEADER = struct.Struct("<4sIdiiQ")
_TILE_RECORD = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("traversal_id", "<u4"), ("timestamp", "<f8")]
)


@dataclass(frozen=True)
class Box3D:
    """Oriented box; ``l`` runs along the yaw direction, ``w`` laterally, ``h`` vertically."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]  # (w, h, l)
    yaw: float = 0.0

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) <= 0:
            raise ValueError(f"box dimensions must be positive, got {self.size}")

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * d[:, 0] + s * d[:, 1]
        y = -s * d[:, 0] + c * d[:, 1]
        w, h, l = self.size
        return (
            (np.abs(x) <= l / 2 + margin)
            & (np.abs(y) <= w / 2 + margin)
            & (np.abs(d[:, 2]) <= h / 2 + margin)
        )


def remove_dynamic_points(
    cloud: PointCloud, boxes: Sequence[Box3D], margin: float = DEFAULT_DYNAMIC_MARGIN
) -> PointCloud:
    if not boxes or len(cloud) == 0:
        return cloud
    inside = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        inside |= box.contains(cloud.positions, margin)
    return cloud.select(~inside)


@dataclass(frozen=True)
class Sweep:
    """One LiDAR sweep in its own ego frame, with global pose and annotation boxes."""

    ego_pose: Pose
    cloud: PointCloud
    boxes: tuple = ()
    traversal_id: int = 0
    timestamp: float = 0.0


@dataclass(eq=False)
class TiledMap:
    tile_size: float
    tiles: dict = field(default_factory=dict)  # (i, j) -> PointCloud
    traversal_meta: dict = field(default_factory=dict)  # id -> (t_start, t_end)
    rejected: list = field(default_factory=list)  # (sweep index, reason)
    stats: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(c) for c in self.tiles.values())

    def all_points(self) -> PointCloud:
        return PointCloud.concat(self.tiles[k] for k in sorted(self.tiles))


def tile_index(xy: np.ndarray, tile_size: float) -> np.ndarray:
    return np.floor(np.asarray(xy)[:, :2] / tile_size).astype(np.int64)


def _prepare_sweep(index: int, sweep: Sweep, margin: float):
    pose, cloud = sweep.ego_pose, sweep.cloud
    if not (np.all(np.isfinite(pose.as_array())) and np.all(np.isfinite(cloud.positions))):
        return index, None, "non-finite pose or points"
    static = remove_dynamic_points(cloud, list(sweep.boxes), margin)
    n = len(static)
    g = PointCloud(
        pose.apply(static.positions),
        np.full(n, sweep.traversal_id, dtype=np.int64),
        np.full(n, float(sweep.timestamp)),
    )
    return index, g, len(cloud) - n


def build_map(
    sweeps: Sequence[Sweep],
    tile_size: float = DEFAULT_TILE_SIZE,
    margin: float = DEFAULT_DYNAMIC_MARGIN,
    workers: Optional[int] = None,
) -> TiledMap:
    """Accumulate static points of all sweeps into global-frame tiles.

    Sweeps with non-finite data are skipped and listed in ``TiledMap.rejected``.
    Tile contents are ordered by (traversal_id, timestamp, input order).
    """
    if tile_size <= 0:
        raise ValueError("tile_size must be positive")
    sweeps = list(sweeps)
    with ThreadPoolExecutor(max_workers=workers or max_workers()) as pool:
        results = list(pool.map(lambda a: _prepare_sweep(*a, margin), enumerate(sweeps)))

    tmap = TiledMap(float(tile_size))
    kept, removed, parts = 0, 0, []
    for index, cloud, info in results:
        if cloud is None:
            log.warning("rejected sweep %d: %s", index, info)
            tmap.rejected.append((index, info))
            continue
        sweep = sweeps[index]
        span = tmap.traversal_meta.get(sweep.traversal_id)
        t = float(sweep.timestamp)
        tmap.traversal_meta[sweep.traversal_id] = (t, t) if span is None else (min(span[0], t), max(span[1], t))
        removed += info
        kept += len(cloud)
        parts.append(cloud)
    tmap.stats = {"sweeps": len(sweeps), "rejected": len(tmap.rejected),
                  "points_kept": kept, "points_removed": removed}
    if not parts:
        return tmap

    allpts = PointCloud.concat(parts)
    order = np.lexsort((np.arange(len(allpts)), allpts.timestamp, allpts.traversal_id))
    allpts = allpts.select(order)
    _bin_into_tiles(tmap, allpts)
    return tmap


def _bin_into_tiles(tmap: TiledMap, cloud: PointCloud) -> None:
    ij = tile_index(cloud.positions, tmap.tile_size)
    keys, inverse = np.unique(ij, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(len(keys) + 1))
    for k, (i, j) in enumerate(keys):
        tmap.tiles[(int(i), int(j))] = cloud.select(order[bounds[k]:bounds[k + 1]])


@dataclass(frozen=True)
class RetrievalQuery:
    """Square query around the ego translation with leakage exclusions.

    Points are dropped when their traversal id is in ``excluded_traversals``
    or equals ``current_traversal``, when their traversal's time span overlaps
    the current span padded by ``time_exclusion_window``, or when their own
    timestamp falls inside that padded span.  The current span comes from
    ``current_span`` or, failing that, the map's metadata for
    ``current_traversal``.
    """

    ego_pose: Pose
    range: float = 50.0
    excluded_traversals: frozenset = frozenset()
    time_exclusion_window: float = DEFAULT_EXCLUSION_WINDOW
    current_traversal: Optional[int] = None
    current_span: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not self.range > 0:
            raise ValueError("retrieval range must be positive")
        if not self.time_exclusion_window >= 0:
            raise ValueError("time exclusion window must be non-negative")
        object.__setattr__(self, "excluded_traversals", frozenset(int(t) for t in self.excluded_traversals))


def exclusion_rule(tmap: TiledMap, q: RetrievalQuery):
    """Resolve a query into (excluded traversal ids, padded time span or None)."""
    excluded = set(q.excluded_traversals)
    span = q.current_span
    if q.current_traversal is not None:
        excluded.add(int(q.current_traversal))
        if span is None:
            span = tmap.traversal_meta.get(int(q.current_traversal))
    if span is None:
        return excluded, None
    lo, hi = span[0] - q.time_exclusion_window, span[1] + q.time_exclusion_window
    for tid, (t0, t1) in tmap.traversal_meta.items():
        if t0 <= hi and t1 >= lo:
            excluded.add(int(tid))
    return excluded, (lo, hi)


def _keep_mask(cloud: PointCloud, center, R, excluded, window) -> np.ndarray:
    d = np.abs(cloud.positions[:, :2] - center)
    keep = (d[:, 0] <= R) & (d[:, 1] <= R)
    if excluded and cloud.traversal_id is not None:
        keep &= ~np.isin(cloud.traversal_id, np.fromiter(excluded, np.int64))
    if window is not None and cloud.timestamp is not None:
        ts = cloud.timestamp
        keep &= ~((ts >= window[0]) & (ts <= window[1]))
    return keep


def retrieve_patch(tmap: TiledMap, q: RetrievalQuery) -> PointCloud:
    """Global-frame points within L∞ horizontal distance ``q.range`` of the ego."""
    center = q.ego_pose.translation[:2]
    R, L = q.range, tmap.tile_size
    excluded, window = exclusion_rule(tmap, q)
    # One-ulp-ish slack so boundary points never fall outside the scanned tiles.
    i0, j0 = np.floor((center - R) / L - 1e-9).astype(int)
    i1, j1 = np.floor((center + R) / L + 1e-9).astype(int)
    parts = []
    for i in range(i0, i1 + 1):
        for j in range(j0, j1 + 1):
            tile = tmap.tiles.get((i, j))
            if tile is None or len(tile) == 0:
                continue
            keep = _keep_mask(tile, center, R, excluded, window)
            if keep.any():
                parts.append(tile.select(keep))
    if not parts:
        return PointCloud.empty(with_attributes=True)
    return PointCloud.concat(parts)


def statistical_outlier_removal(
    cloud: PointCloud, k: int = DEFAULT_SOR_K, std_ratio: float = DEFAULT_SOR_STD_RATIO
) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + std_ratio * std."""
    n = len(cloud)
    if n <= k:
        raise ValueError(f"insufficient points for k-NN statistics: N={n}, k={k}")
    tree = cKDTree(cloud.positions)
    # k+1 neighbors: the nearest is the point itself at distance 0.
    dist, _ = tree.query(cloud.positions, k=k + 1, workers=max_workers())
    mean_d = dist[:, 1:].mean(axis=1)
    threshold = mean_d.mean() + std_ratio * mean_d.std()
    return cloud.select(mean_d <= threshold)


def voxel_downsample(cloud: PointCloud, voxel: float = DEFAULT_POOL_VOXEL) -> PointCloud:
    """Average-pool points per occupied voxel; output sorted by voxel index.

    Traversal ids and timestamps are dropped because pooled points mix sources.
    """
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    if len(cloud) == 0:
        return PointCloud.empty()
    _, means, _ = group_means(cloud.positions, voxel)
    return PointCloud(means)


def group_means(points: np.ndarray, voxel: float):
    """Group points by ``floor(p / voxel)``; return (indices, means, counts) sorted by index."""
    idx = np.floor(points / voxel).astype(np.int64)
    keys, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack([np.bincount(inverse, weights=points[:, a], minlength=len(keys)) for a in range(3)], axis=1)
    return keys, sums / counts[:, None], counts


def to_ego_frame(patch: PointCloud, ego_pose: Pose) -> PointCloud:
    return transform_points(invert(ego_pose), patch)


@dataclass(frozen=True)
class PriorParams:
    sor_k: int = DEFAULT_SOR_K
    sor_std_ratio: float = DEFAULT_SOR_STD_RATIO
    pool_voxel: float = DEFAULT_POOL_VOXEL


def ego_map_prior(tmap: TiledMap, q: RetrievalQuery, params: PriorParams = PriorParams()) -> PointCloud:
    """Retrieve, denoise, pool and move the local patch into the ego frame.

    The steps run in a fixed order: L∞ retrieval with exclusions, statistical
    outlier removal, voxel average pooling, then the global-to-ego transform.
    Outlier removal is skipped when the patch has no more than ``sor_k`` points.
    """
    patch = retrieve_patch(tmap, q)
    if len(patch) > params.sor_k:
        patch = statistical_outlier_removal(patch, params.sor_k, params.sor_std_ratio)
    patch = voxel_downsample(patch, params.pool_voxel)
    return to_ego_frame(patch, q.ego_pose)


# --- tile files ---------------------------------------------------------------


def write_tile(path, cloud: PointCloud, i: int = 0, j: int = 0, tile_size: float = 0.0) -> None:
    """Write the little-endian ``MPTL`` tile format.

    Missing traversal ids are written as 0xFFFFFFFF and missing timestamps as NaN.
    """
    n = len(cloud)
    rec = np.empty(n, dtype=_TILE_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.positions.T.astype(np.float32)
    rec["traversal_id"] = NO_TRAVERSAL if cloud.traversal_id is None else cloud.traversal_id.astype(np.uint32)
    rec["timestamp"] = np.nan if cloud.timestamp is None else cloud.timestamp
    with open(path, "wb") as f:
        f.write(_TILE_HEADER.pack(TILE_MAGIC, TILE_VERSION, float(tile_size), int(i), int(j), n))
        f.write(rec.tobytes())


def read_tile(path):
    """Return ``(cloud, i, j, tile_size)``."""
    data = Path(path).read_bytes()
    if len(data) < _TILE_HEADER.size:
        raise ValueError(f"{path}: truncated tile header")
    magic, version, tile_size, i, j, n = _TILE_HEADER.unpack_from(data)
    if magic != TILE_MAGIC or version != TILE_VERSION:
        raise ValueError(f"{path}: not an MPTL v{TILE_VERSION} file")
    expected = _TILE_HEADER.size + n * _TILE_RECORD.itemsize
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    rec = np.frombuffer(data, dtype=_TILE_RECORD, count=n, offset=_TILE_HEADER.size)
    pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    tid_raw = rec["traversal_id"]
    tid = None if n and np.all(tid_raw == NO_TRAVERSAL) else tid_raw.astype(np.int64)
    ts = None if n and np.all(np.isnan(rec["timestamp"])) else rec["timestamp"].astype(np.float64)
    return PointCloud(pos, tid, ts), i, j, tile_size


MANIFEST_NAME = "manifest.json"


def save_map(tmap: TiledMap, out_dir, provenance: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for (i, j), cloud in sorted(tmap.tiles.items()):
        write_tile(out / f"tile_{i}_{j}.mptl", cloud, i, j, tmap.tile_size)
    manifest = {
        "format": "mptl-map",
        "version": TILE_VERSION,
        "tile_size": tmap.tile_size,
        "traversals": {str(k): list(v) for k, v in sorted(tmap.traversal_meta.items())},
        "tiles": [[i, j, len(tmap.tiles[(i, j)])] for i, j in sorted(tmap.tiles)],
        "stats": tmap.stats,
    }
    if provenance is not None:
        manifest["config"] = provenance
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_map(map_dir) -> TiledMap:
    """Load a map directory; points are re-binned so the floor rule holds after f32 rounding."""
    d = Path(map_dir)
    manifest = json.loads((d / MANIFEST_NAME).read_text())
    tmap = TiledMap(float(manifest["tile_size"]))
    tmap.traversal_meta = {int(k): (float(v[0]), float(v[1])) for k, v in manifest["traversals"].items()}
    tmap.stats = manifest.get("stats", {})
    clouds = []
    for i, j, _ in manifest["tiles"]:
        cloud, *_ = read_tile(d / f"tile_{i}_{j}.mptl")
        clouds.append(cloud)
    if clouds:
        _bin_into_tiles(tmap, PointCloud.concat(clouds))
    return tmap
