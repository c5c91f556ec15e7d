"""``mapprior`` command-line interface.

Exit codes: 0 success, 1 input error, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import augment, bev_encoder, config as cfgmod, map_store, pose_align, pv_encoder
from .geometry import Pose, PointCloud, PoseRecord, compose, invert, read_pose_file, write_pose_file

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mapprior")


class InputError(Exception):
    pass


# --- readers --------------------------------------------------------------------


def _require(path: Path) -> Path:
    if not path.is_file():
        raise InputError(f"missing input file: {path}")
    return path


def read_cloud(path) -> PointCloud:
    """Load ``.mptl``, ``.npy`` (N×3) or whitespace text (x y z per line)."""
    path = _require(Path(path))
    try:
        if path.suffix == ".mptl":
            return map_store.read_tile(path)[0]
        if path.suffix == ".npy":
            return PointCloud(np.load(path))
        return PointCloud(np.loadtxt(path, ndmin=2)[:, :3])
    except (ValueError, OSError) as exc:
        raise InputError(f"unreadable point cloud {path}: {exc}") from None


def read_boxes(path) -> list[map_store.Box3D]:
    path = _require(Path(path))
    try:
        raw = json.loads(path.read_text())
        return [map_store.Box3D(tuple(b["center"]), tuple(b["size"]), float(b.get("yaw", 0.0))) for b in raw]
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"unreadable box file {path}: {exc}") from None


def _entry_pose(entry: dict, base: Path) -> Pose:
    if "pose" in entry:
        return Pose.from_array(entry["pose"])
    path = _require(base / entry["pose_file"])
    try:
        recs = read_pose_file(path)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if not recs:
        raise InputError(f"pose file {path} has no records")
    return recs[0].pose


def read_sweep_manifest(path) -> list[map_store.Sweep]:
    """JSON manifest: ``{"sweeps": [{"pose" | "pose_file", "cloud", "boxes"?, "traversal_id", "timestamp"}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = _require(Path(path))
    try:
        manifest = json.loads(path.read_text())
    except ValueError as exc:
        raise InputError(f"unreadable manifest {path}: {exc}") from None
    base = path.parent
    sweeps = []
    for k, entry in enumerate(manifest.get("sweeps", [])):
        try:
            pose = _entry_pose(entry, base)
            cloud = read_cloud(base / entry["cloud"])
            boxes = read_boxes(base / entry["boxes"]) if entry.get("boxes") else []
            sweeps.append(map_store.Sweep(pose, cloud, tuple(boxes), int(entry.get("traversal_id", 0)),
                                          float(entry.get("timestamp", 0.0))))
        except (KeyError, TypeError) as exc:
            raise InputError(f"{path}: sweep {k}: bad entry ({exc})") from None
    return sweeps


# --- commands ---------------------------------------------------------------------


def cmd_build_map(args, cfg) -> int:
    sweeps = read_sweep_manifest(args.manifest)
    tmap = map_store.build_map(sweeps, cfg["map"]["tile_size"], cfg["map"]["dynamic_margin"])
    map_store.save_map(tmap, args.out_dir, provenance=cfg)
    s = tmap.stats
    print(f"tiles={len(tmap.tiles)} points_kept={s['points_kept']} "
          f"points_removed={s['points_removed']} rejected_sweeps={s['rejected']}")
    for index, reason in tmap.rejected:
        print(f"rejected sweep {index}: {reason}", file=sys.stderr)
    return EXIT_OK


def _query_pose(args) -> Pose:
    if args.pose is not None:
        return Pose.from_array([float(x) for x in args.pose])
    if args.pose_file is None:
        raise InputError("one of --pose or --pose-file is required")
    recs = read_pose_file(_require(Path(args.pose_file)))
    for r in recs:
        if (args.sequence is None or r.sequence_id == args.sequence) and (args.frame is None or r.frame_id == args.frame):
            return r.pose
    raise InputError(f"no pose record for sequence={args.sequence} frame={args.frame} in {args.pose_file}")


def retrieval_query(cfg, pose: Pose, current=None, exclude=()) -> map_store.RetrievalQuery:
    return map_store.RetrievalQuery(
        pose, float(cfg["map"]["range"]), frozenset(exclude), float(cfg["map"]["exclusion_window"]),
        current_traversal=current,
    )


def cmd_retrieve(args, cfg) -> int:
    map_dir = Path(args.map_dir)
    _require(map_dir / map_store.MANIFEST_NAME)
    tmap = map_store.load_map(map_dir)
    q = retrieval_query(cfg, _query_pose(args), args.traversal, args.exclude or ())
    patch = map_store.ego_map_prior(tmap, q, cfgmod.prior_params(cfg))
    map_store.write_tile(args.out, patch, 0, 0, 0.0)
    Path(str(args.out) + ".json").write_text(json.dumps({"config": cfg, "points": len(patch)}, indent=2, sort_keys=True) + "\n")
    print(f"patch points={len(patch)}")
    return EXIT_OK


def cmd_rasterize(args, cfg) -> int:
    patch = read_cloud(args.patch)
    cams = cfgmod.cameras(cfg)
    params = cfgmod.pv_params(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for cam, t in zip(cams, pv_encoder.assemble_rig(cams, patch, params)):
        pv_encoder.write_tensor(out / f"{cam.name}.pvt", t, provenance=cfg)
    print(f"cameras={len(cams)} channels={params.channels}")
    return EXIT_OK


def cmd_voxelize(args, cfg) -> int:
    patch = read_cloud(args.patch)
    b = cfg["bev"]
    grid = bev_encoder.voxelize(patch, b["voxel_size"], b["range"], tuple(b["z_bounds"]))
    bev_encoder.write_voxels(args.out, grid, provenance=cfg)
    print(f"voxels={len(grid)} points={int(grid.counts.sum())}")
    return EXIT_OK


def cmd_mask(args, cfg) -> int:
    path = _require(Path(args.input))
    seed = cfgmod.gridmask_seed(cfg)
    if path.suffix == ".pvt":
        mask = augment.sample_mask(augment.derive_seed(seed, args.frame, "pv", args.camera),
                                   cfgmod.gridmask_config(cfg, augment.IMAGE))
        t = pv_encoder.read_tensor(path)
        pv_encoder.write_tensor(args.out, augment.apply_pv(mask, t), provenance=cfg)
    elif path.suffix == ".mptl":
        mask = augment.sample_mask(augment.derive_seed(seed, args.frame, "bev"),
                                   cfgmod.gridmask_config(cfg, augment.BEV))
        cloud = read_cloud(path)
        map_store.write_tile(args.out, augment.apply_bev(mask, cloud), 0, 0, 0.0)
    else:
        mask = augment.sample_mask(augment.derive_seed(seed, args.frame, "image", args.camera),
                                   cfgmod.gridmask_config(cfg, augment.IMAGE))
        if path.suffix == ".npy":
            np.save(args.out, augment.apply_image(mask, np.load(path)))
        else:
            try:
                img = np.asarray(Image.open(path))
            except OSError as exc:
                raise InputError(f"unreadable image {path}: {exc}") from None
            Image.fromarray(augment.apply_image(mask, img)).save(args.out)
    print(f"period={mask.period:g} ratio={mask.ratio:.4f} offset=({mask.offset[0]:.4f}, {mask.offset[1]:.4f})")
    return EXIT_OK


def read_sequence_clouds(cloud_dir, sequence_ids) -> dict:
    d = Path(cloud_dir)
    out = {}
    for s in sequence_ids:
        for ext in (".mptl", ".npy", ".xyz", ".txt"):
            if (d / f"{s}{ext}").is_file():
                out[s] = read_cloud(d / f"{s}{ext}")
                break
    return out


def anchor_poses(records) -> dict:
    """Per-sequence anchor: the record with the smallest frame id."""
    anchors = {}
    for r in records:
        cur = anchors.get(r.sequence_id)
        if cur is None or r.frame_id < cur.frame_id:
            anchors[r.sequence_id] = r
    return {k: r.pose for k, r in anchors.items()}


def corrected_records(records, old: dict, new: dict) -> list[PoseRecord]:
    out = []
    for r in records:
        fix = compose(new[r.sequence_id], invert(old[r.sequence_id])) if r.sequence_id in new else Pose()
        out.append(PoseRecord(r.sequence_id, r.frame_id, r.timestamp, compose(fix, r.pose)))
    return out


def cmd_align(args, cfg) -> int:
    pose_path = _require(Path(args.pose_file))
    try:
        records = read_pose_file(pose_path)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    anchors = anchor_poses(records)
    clouds = read_sequence_clouds(args.cloud_dir, anchors)
    missing = sorted(set(anchors) - set(clouds))
    if missing:
        raise InputError(f"no cloud file in {args.cloud_dir} for sequences: {', '.join(missing)}")
    a = cfg["align"]
    res = pose_align.align_sequences(clouds, anchors, fixed=args.fixed, tile_size=cfg["map"]["tile_size"],
                                     threshold=a["threshold"], max_iter=a["max_iter"])
    write_pose_file(args.out, corrected_records(records, anchors, res.poses))
    if args.graph:
        pose_align.write_graph(args.graph, res.graph)
    opt = res.optimization
    print(f"edges={len(res.graph.edges)} initial_cost={opt.initial_cost:.6g} "
          f"final_cost={opt.final_cost:.6g} status={opt.status}")
    return EXIT_OK


def inspect_tensor(tensor_path, out_dir) -> list[Path]:
    """Write each channel as an 8-bit PNG, linearly scaled from its min..max to 0..255."""
    t = pv_encoder.read_tensor(_require(Path(tensor_path)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, sidecar = [], {"scaling": "pixel = round(255 * (value - min) / (max - min)); 0 if max == min",
                            "tensor": pv_encoder.read_tensor_header(tensor_path), "channels": []}
    for c, name in enumerate(t.channel_names):
        ch = t.data[..., c].astype(np.float64)
        lo, hi = float(ch.min()), float(ch.max())
        img = np.zeros(ch.shape, np.uint8) if hi == lo else np.round(255 * (ch - lo) / (hi - lo)).astype(np.uint8)
        p = out / f"{c:02d}_{name}.png"
        Image.fromarray(img, mode="L").save(p)
        written.append(p)
        sidecar["channels"].append({"index": c, "name": name, "file": p.name, "min": lo, "max": hi})
    (out / "channels.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return written


def cmd_inspect(args, cfg) -> int:
    written = inspect_tensor(args.tensor, args.out_dir)
    print(f"images={len(written)}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapprior", description="Static map prior toolkit.")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-map", help="build a tiled map from a sweep manifest")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_build_map)

    p = sub.add_parser("retrieve", help="ego-frame map prior around a pose")
    p.add_argument("map_dir")
    p.add_argument("out")
    p.add_argument("--pose", nargs=7, metavar=("QX", "QY", "QZ", "QW", "TX", "TY", "TZ"))
    p.add_argument("--pose-file")
    p.add_argument("--sequence")
    p.add_argument("--frame", type=int)
    p.add_argument("--traversal", type=int, help="current traversal id (excluded, with its time window)")
    p.add_argument("--exclude", type=int, nargs="*", help="additional traversal ids to exclude")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rasterize-pv", help="PV map tensors for every configured camera")
    p.add_argument("patch")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("voxelize-bev", help="sparse BEV voxel features")
    p.add_argument("patch")
    p.add_argument("out")
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("mask", help="grid-mask an image (.png/.npy), PV tensor (.pvt) or patch (.mptl)")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--camera", type=int, default=0)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("align", help="refine per-sequence global poses")
    p.add_argument("cloud_dir")
    p.add_argument("pose_file")
    p.add_argument("out")
    p.add_argument("--graph", help="also write the optimized pose graph")
    p.add_argument("--fixed", help="sequence id held fixed (default: first)")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("inspect", help="dump PV tensor channels as grayscale PNGs")
    p.add_argument("tensor")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config:
            _require(Path(args.config))
        cfg = cfgmod.load_config(args.config, args.set)
        return args.func(args, cfg)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pose_align.NoOverlapError, pose_align.DisconnectedGraphError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, OSError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
