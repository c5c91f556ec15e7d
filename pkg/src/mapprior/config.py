"""Pipeline configuration: one YAML file plus ``key=value`` overrides.

Keys are dotted paths into the nested mapping, e.g. ``map.tile_size`` or
``gridmask.image.period_px``.  Validation errors name the offending key.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from . import augment, bev_encoder, map_store, pose_align, pv_encoder
from .geometry import CameraModel, surround_rig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def default_config() -> dict:
    return {
        "seed": 0,
        "map": {
            "tile_size": map_store.DEFAULT_TILE_SIZE,
            "range": 50.0,
            "pool_voxel": map_store.DEFAULT_POOL_VOXEL,
            "sor_k": map_store.DEFAULT_SOR_K,
            "sor_std_ratio": map_store.DEFAULT_SOR_STD_RATIO,
            "dynamic_margin": map_store.DEFAULT_DYNAMIC_MARGIN,
            "exclusion_window": map_store.DEFAULT_EXCLUSION_WINDOW,
        },
        "pv": {
            "d_max": pv_encoder.DEFAULT_D_MAX,
            "spread_radius": pv_encoder.DEFAULT_SPREAD_RADIUS,
            "embed_dim": pv_encoder.DEFAULT_EMBED_DIM,
        },
        "bev": {
            "voxel_size": bev_encoder.DEFAULT_VOXEL_SIZE,
            "range": bev_encoder.DEFAULT_BEV_RANGE,
            "z_bounds": list(bev_encoder.DEFAULT_Z_BOUNDS),
            "cells": bev_encoder.DEFAULT_BEV_CELLS,
        },
        "gridmask": {
            "seed": None,
            "image": {"period_px": list(augment.IMAGE_DEFAULTS.period), "ratio": list(augment.IMAGE_DEFAULTS.ratio)},
            "bev": {"period_m": list(augment.BEV_DEFAULTS.period), "ratio": list(augment.BEV_DEFAULTS.ratio)},
        },
        "align": {
            "threshold": pose_align.DEFAULT_CORRESPONDENCE_DISTANCE,
            "max_iter": 100,
        },
        "cameras": [c.to_dict() for c in surround_rig()],
    }


def _set(cfg: dict, key: str, value: Any) -> None:
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(key, "unknown key")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(key, "unknown key")
    node[parts[-1]] = value


def _get(cfg: dict, key: str) -> Any:
    node = cfg
    for p in key.split("."):
        node = node[p]
    return node


def _merge(base: dict, over: dict, prefix: str = "") -> None:
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(key, "unknown key")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _merge(base[k], v, key + ".")
        else:
            base[k] = v


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> dict:
    """Defaults, then the YAML file, then ``key=value`` overrides (values parsed as YAML)."""
    cfg = default_config()
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("<root>", "config file must hold a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        _set(cfg, key.strip(), yaml.safe_load(raw))
    validate(cfg)
    return cfg


_POSITIVE = [
    "map.tile_size", "map.range", "map.pool_voxel", "map.sor_std_ratio",
    "pv.d_max", "bev.voxel_size", "bev.range", "align.threshold",
]
_POSITIVE_INT = ["map.sor_k", "pv.spread_radius", "bev.cells", "align.max_iter"]


def validate(cfg: dict) -> None:
    for key in _POSITIVE:
        v = _get(cfg, key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(key, f"must be a positive number, got {v!r}")
    for key in _POSITIVE_INT:
        v = _get(cfg, key)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(key, f"must be a positive integer, got {v!r}")
    for key in ["map.dynamic_margin", "map.exclusion_window"]:
        v = _get(cfg, key)
        if not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(key, f"must be a non-negative number, got {v!r}")
    E = cfg["pv"]["embed_dim"]
    if not isinstance(E, int) or E < 2 or E % 2:
        raise ConfigError("pv.embed_dim", f"must be an even integer >= 2, got {E!r}")
    zb = cfg["bev"]["z_bounds"]
    if not (isinstance(zb, (list, tuple)) and len(zb) == 2 and zb[0] < zb[1]):
        raise ConfigError("bev.z_bounds", f"must be [min, max] with min < max, got {zb!r}")
    for key, domain in [("gridmask.image", augment.IMAGE), ("gridmask.bev", augment.BEV)]:
        pkey = f"{key}.period_px" if domain == augment.IMAGE else f"{key}.period_m"
        try:
            augment.GridMaskConfig(_pair(_get(cfg, pkey)), (0.0, 0.0), domain)
        except (TypeError, ValueError) as exc:
            raise ConfigError(pkey, str(exc)) from None
        try:
            augment.GridMaskConfig((1, 1), _pair(_get(cfg, f"{key}.ratio")), domain)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}.ratio", str(exc)) from None
    cams = cfg["cameras"]
    if not isinstance(cams, list) or not cams:
        raise ConfigError("cameras", "at least one camera is required")
    for i, c in enumerate(cams):
        try:
            CameraModel.from_dict(c)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"cameras[{i}]", str(exc)) from None


def _pair(v) -> tuple:
    if isinstance(v, (int, float)):
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2:
        return tuple(v)
    raise ValueError(f"expected a number or a [lo, hi] pair, got {v!r}")


# --- typed views --------------------------------------------------------------


def cameras(cfg: dict) -> list[CameraModel]:
    return [CameraModel.from_dict(c) for c in cfg["cameras"]]


def pv_params(cfg: dict) -> pv_encoder.PVParams:
    return pv_encoder.PVParams(
        float(cfg["pv"]["d_max"]), float(cfg["map"]["range"]),
        int(cfg["pv"]["spread_radius"]), int(cfg["pv"]["embed_dim"]),
    )


def prior_params(cfg: dict) -> map_store.PriorParams:
    m = cfg["map"]
    return map_store.PriorParams(int(m["sor_k"]), float(m["sor_std_ratio"]), float(m["pool_voxel"]))


def gridmask_config(cfg: dict, domain: str) -> augment.GridMaskConfig:
    g = cfg["gridmask"]
    if domain == augment.IMAGE:
        return augment.GridMaskConfig(_pair(g["image"]["period_px"]), _pair(g["image"]["ratio"]), augment.IMAGE)
    return augment.GridMaskConfig(_pair(g["bev"]["period_m"]), _pair(g["bev"]["ratio"]), augment.BEV)


def gridmask_seed(cfg: dict) -> int:
    s = cfg["gridmask"]["seed"]
    return int(cfg["seed"] if s is None else s)


def effective(cfg: dict) -> dict:
    return copy.deepcopy(cfg)
