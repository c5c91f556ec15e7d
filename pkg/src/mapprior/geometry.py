"""Rigid transforms, point clouds and pinhole cameras.

Conventions used throughout the package:

* Quaternions are stored scalar-last, ``(qx, qy, qz, qw)``, Hamilton product,
  canonicalized so that ``qw >= 0``.  Every file format uses this order.
* A ``Pose`` maps points from its child frame into its parent frame:
  ``x_parent = R @ x_child + t``.  ``compose(a, b)`` applies ``b`` first.
* Ego frame: x forward, y left, z up.  Camera frame: x right, y down, z
  along the optical axis.  ``CameraModel.extrinsic`` is the ego-to-camera
  transform, so ``x_cam = extrinsic.apply(x_ego)``.
* SE(3) tangent vectors are ordered rotation first: ``xi = (phi, rho)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial.transform import Rotation

DEPTH_MIN = 1e-3  # meters; points at or below this camera depth are culled


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.sqrt(q @ q))
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q!r}")
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-last quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)],
            [2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)],
            [2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with a unit quaternion (x, y, z, w) and translation in meters."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t!r}")
        object.__setattr__(self, "quat", _frozen(_canonical_quat(self.quat)))
        object.__setattr__(self, "translation", _frozen(t))
        object.__setattr__(self, "_R", _frozen(quat_to_matrix(self.quat)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(translation=t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat(), translation)

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls([0.0, 0.0, math.sin(yaw / 2), math.cos(yaw / 2)], translation)

    @classmethod
    def from_array(cls, values) -> "Pose":
        """Build from ``(qx, qy, qz, qw, tx, ty, tz)``."""
        v = np.asarray(values, dtype=np.float64).reshape(7)
        return cls(v[:4], v[4:])

    @property
    def rotation(self) -> np.ndarray:
        return self._R

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self._R
        m[:3, 3] = self.translation
        return m

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.quat, self.translation])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self._R.T + self.translation

    def inverse(self) -> "Pose":
        return invert(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self._R, other._R, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )

    def __repr__(self):
        q = ", ".join(f"{v:.6g}" for v in self.quat)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"Pose(quat=[{q}], translation=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    return Pose(quat_multiply(a.quat, b.quat), a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    q = p.quat * np.array([-1.0, -1.0, -1.0, 1.0])
    return Pose(q, -(p.rotation.T @ p.translation))


# --- SE(3) exponential / logarithm, tangent order (phi, rho) -----------------


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * K
        + (theta - math.sin(theta)) / theta**3 * (K @ K)
    )


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half * math.cos(half) / math.sin(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def se3_exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=np.float64)
    phi, rho = xi[:3], xi[3:]
    return Pose(Rotation.from_rotvec(phi).as_quat(), so3_left_jacobian(phi) @ rho)


def se3_log(p: Pose) -> np.ndarray:
    phi = Rotation.from_quat(p.quat).as_rotvec()
    rho = so3_left_jacobian_inv(phi) @ p.translation
    return np.concatenate([phi, rho])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint for (phi, rho) ordering: Exp(Ad·xi) = P Exp(xi) P⁻¹."""
    R = p.rotation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(p.translation) @ R
    return A


def _se3_q_block(phi: np.ndarray, rho: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    P = skew(phi)
    Rh = skew(rho)
    if theta < 1e-5:
        c1, c2, c3 = 1.0 / 6.0, 1.0 / 24.0, 1.0 / 120.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (theta**2 + 2.0 * c - 2.0) / (2.0 * theta**4)
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta**5)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3.0 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=np.float64)
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, 3:] = J
    out[3:, :3] = _se3_q_block(phi, rho)
    return out


def se3_right_jacobian(xi) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=np.float64))


# --- point clouds -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N×3 positions in meters with optional per-point traversal id and timestamp."""

    positions: np.ndarray
    traversal_id: Optional[np.ndarray] = None
    timestamp: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "positions", _frozen(pos))
        n = len(pos)
        if self.traversal_id is not None:
            tid = np.array(self.traversal_id, dtype=np.int64).reshape(-1)
            if len(tid) != n:
                raise ValueError(f"traversal_id has length {len(tid)}, expected {n}")
            object.__setattr__(self, "traversal_id", _frozen(tid))
        if self.timestamp is not None:
            ts = np.array(self.timestamp, dtype=np.float64).reshape(-1)
            if len(ts) != n:
                raise ValueError(f"timestamp has length {len(ts)}, expected {n}")
            object.__setattr__(self, "timestamp", _frozen(ts))

    @classmethod
    def empty(cls, with_attributes: bool = False) -> "PointCloud":
        if with_attributes:
            return cls(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros(0))
        return cls(np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_attributes(self) -> bool:
        return self.traversal_id is not None or self.timestamp is not None

    def select(self, index) -> "PointCloud":
        """Subset by boolean mask or integer index array."""
        return PointCloud(
            self.positions[index],
            None if self.traversal_id is None else self.traversal_id[index],
            None if self.timestamp is None else self.timestamp[index],
        )

    def with_positions(self, positions) -> "PointCloud":
        return PointCloud(positions, self.traversal_id, self.timestamp)

    @staticmethod
    def concat(clouds: Iterable["PointCloud"]) -> "PointCloud":
        clouds = list(clouds)
        if not clouds:
            return PointCloud.empty()
        pos = np.concatenate([c.positions for c in clouds])
        tid = ts = None
        if all(c.traversal_id is not None for c in clouds):
            tid = np.concatenate([c.traversal_id for c in clouds])
        if all(c.timestamp is not None for c in clouds):
            ts = np.concatenate([c.timestamp for c in clouds])
        return PointCloud(pos, tid, ts)


def transform_points(p: Pose, cloud: PointCloud) -> PointCloud:
    return cloud.with_positions(p.apply(cloud.positions))


# --- cameras ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose)
    name: str = "cam"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_ego):
        """Vectorized projection of ego-frame points.

        Returns ``(u, v, depth, valid)``; ``u``, ``v``, ``depth`` are only
        meaningful where ``valid`` is true.
        """
        pc = self.extrinsic.apply(np.asarray(points_ego, dtype=np.float64).reshape(-1, 3))
        z = pc[:, 2]
        front = z > DEPTH_MIN
        zs = np.where(front, z, 1.0)
        u = self.cx + self.fx * pc[:, 0] / zs
        v = self.cy + self.fy * pc[:, 1] / zs
        valid = front & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return u, v, z, valid

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsic": self.extrinsic.as_array().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        ext = d.get("extrinsic")
        return cls(
            float(d["fx"]),
            float(d["fy"]),
            float(d["cx"]),
            float(d["cy"]),
            int(d["width"]),
            int(d["height"]),
            Pose() if ext is None else Pose.from_array(ext),
            str(d.get("name", "cam")),
        )


def project_point(cam: CameraModel, p_ego) -> Optional[tuple[float, float, float]]:
    """Project one ego-frame point; ``None`` when behind the camera or off-image."""
    u, v, z, valid = cam.project(np.asarray(p_ego, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


# Ego (x fwd, y left, z up) -> optical (x right, y down, z fwd) for a forward camera.
_EGO_TO_OPTICAL = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def camera_extrinsic(yaw: float, position=(0.0, 0.0, 0.0), pitch: float = 0.0) -> Pose:
    """Ego-to-camera transform for a camera at ``position`` looking along ``yaw``.

    ``pitch`` tilts the optical axis down for positive values.
    """
    mount = Rotation.from_euler("zy", [yaw, pitch]).as_matrix()
    R = _EGO_TO_OPTICAL @ mount.T
    return Pose.from_matrix(_rigid(R, -R @ np.asarray(position, dtype=np.float64)))


def _rigid(R, t) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    return m


def surround_rig(
    n: int = 6,
    width: int = 960,
    height: int = 640,
    hfov_deg: float = 70.0,
    mount=(1.0, 0.0, 1.6),
) -> list[CameraModel]:
    """Evenly spaced ring of identical pinhole cameras around the ego vehicle."""
    f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
    cams = []
    for k in range(n):
        yaw = 2 * math.pi * k / n
        cams.append(
            CameraModel(f, f, width / 2, height / 2, width, height,
                        camera_extrinsic(yaw, mount), name=f"cam{k}")
        )
    return cams


# --- pose files ---------------------------------------------------------------
#
# One record per line:  sequence_id frame_id timestamp qx qy qz qw tx ty tz
# Blank lines and lines starting with '#' are ignored.


@dataclass(frozen=True, eq=False)
class PoseRecord:
    sequence_id: str
    frame_id: int
    timestamp: float
    pose: Pose


def read_pose_file(path) -> list[PoseRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ValueError(f"{path}:{lineno}: expected 10 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts[3:]]
            rec = PoseRecord(parts[0], int(parts[1]), float(parts[2]), Pose.from_array(vals))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        records.append(rec)
    return records


def format_pose_record(rec: PoseRecord) -> str:
    vals = " ".join(repr(float(v)) for v in rec.pose.as_array())
    return f"{rec.sequence_id} {rec.frame_id} {rec.timestamp!r} {vals}"


def write_pose_file(path, records: Iterable[PoseRecord]) -> None:
    lines = ["# sequence_id frame_id timestamp qx qy qz qw tx ty tz"]
    lines += [format_pose_record(r) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")
