"""Shared domain types and pinhole camera math.

Conventions: camera frame is x right, y down, z forward; poses are
camera-to-world; depth means camera-frame z; pixel (u, v) sits at the
continuous image coordinate (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FEATURE_DIM = 32


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @property
    def f_mean(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                min(self.cx * factor, w - 1e-6), min(self.cy * factor, h - 1e-6), w, h)


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def validate(self, tol: float = 1e-6) -> "Pose":
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise DomainError("pose has non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
            raise DomainError("pose rotation is not orthonormal with det +1")
        return self

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, -1.0, 0.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        # image y points down, so "up" in the world is -y in camera space
        x = np.cross(-np.asarray(up, dtype=np.float64), z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass
class Surfel:
    id: int
    position: np.ndarray
    normal: np.ndarray
    radius: float
    weight: float
    feature: np.ndarray


class SurfelMap:
    """Growable struct-of-arrays surfel collection with stable integer ids.

    Geometry and features are stored per row; ``ids[i]`` names row ``i``.
    Rows are never reordered, so row index is a stable handle within one map
    object too.
    """

    def __init__(self, feature_dim: int = FEATURE_DIM, dtype=np.float32):
        self.feature_dim = int(feature_dim)
        self.dtype = np.dtype(dtype)
        self.ids = np.zeros(0, dtype=np.int64)
        self.positions = np.zeros((0, 3), dtype=self.dtype)
        self.normals = np.zeros((0, 3), dtype=self.dtype)
        self.radii = np.zeros(0, dtype=self.dtype)
        self.weights = np.zeros(0, dtype=self.dtype)
        self.features = np.zeros((0, self.feature_dim), dtype=self.dtype)
        self.next_id = 0

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_arrays(cls, positions, normals, radii, weights, features, ids=None, next_id=None, dtype=None):
        features = np.asarray(features)
        m = cls(features.shape[1], dtype=dtype or features.dtype)
        m.append(positions, normals, radii, weights, features, ids=ids)
        if next_id is not None:
            m.next_id = max(m.next_id, int(next_id))
        return m

    def append(self, positions, normals, radii, weights, features, ids=None) -> np.ndarray:
        """Add rows; fresh ids are issued from ``next_id`` unless given."""
        positions = np.asarray(positions, dtype=self.dtype).reshape(-1, 3)
        n = len(positions)
        features = np.asarray(features, dtype=self.dtype).reshape(n, -1 if n else self.feature_dim)
        if features.shape[1] != self.feature_dim:
            raise DomainError(f"feature length {features.shape[1]} != map feature_dim {self.feature_dim}")
        if ids is None:
            ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64).reshape(n)
            if len(np.intersect1d(ids, self.ids)) or len(np.unique(ids)) != n:
                raise DomainError("duplicate surfel ids")
        self.ids = np.concatenate([self.ids, ids])
        self.positions = np.concatenate([self.positions, positions])
        self.normals = np.concatenate([self.normals, np.asarray(normals, dtype=self.dtype).reshape(n, 3)])
        self.radii = np.concatenate([self.radii, np.asarray(radii, dtype=self.dtype).reshape(n)])
        self.weights = np.concatenate([self.weights, np.asarray(weights, dtype=self.dtype).reshape(n)])
        self.features = np.concatenate([self.features, features])
        if n:
            self.next_id = max(self.next_id, int(ids.max()) + 1)
        return ids

    def add(self, surfel: Surfel) -> int:
        ids = None if surfel.id is None else [surfel.id]
        return int(self.append(surfel.position, surfel.normal, surfel.radius, surfel.weight, surfel.feature, ids=ids)[0])

    def surfel(self, row: int) -> Surfel:
        return Surfel(int(self.ids[row]), self.positions[row].copy(), self.normals[row].copy(),
                      float(self.radii[row]), float(self.weights[row]), self.features[row].copy())

    def __iter__(self):
        return (self.surfel(i) for i in range(len(self)))

    def row_of(self, surfel_id: int) -> int:
        hit = np.flatnonzero(self.ids == surfel_id)
        if not len(hit):
            raise KeyError(surfel_id)
        return int(hit[0])

    def copy(self) -> "SurfelMap":
        m = SurfelMap(self.feature_dim, self.dtype)
        for name in ("ids", "positions", "normals", "radii", "weights", "features"):
            setattr(m, name, getattr(self, name).copy())
        m.next_id = self.next_id
        return m

    def total_weight(self) -> float:
        return float(self.weights.astype(np.float64).sum())

    def nbytes(self) -> int:
        return sum(getattr(self, k).nbytes for k in ("ids", "positions", "normals", "radii", "weights", "features"))

    def validate(self, tol: float = 1e-6) -> None:
        if len(np.unique(self.ids)) != len(self.ids):
            raise DomainError("surfel ids are not unique")
        arrays = (self.positions, self.normals, self.radii, self.weights, self.features)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise DomainError("non-finite surfel attributes")
        if np.any(self.radii <= 0) or np.any(self.weights <= 0):
            raise DomainError("radius and weight must be positive")
        # float32 storage rounds unit vectors to about 1e-7
        norms = np.linalg.norm(self.normals.astype(np.float64), axis=1)
        if len(norms) and np.abs(norms - 1).max() > max(tol, 4 * np.finfo(self.dtype).eps):
            raise DomainError("normals are not unit length")

    def geometry_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.ids, self.positions, self.normals, self.radii, self.weights):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: "SurfelMap") -> bool:
        """Exact (bitwise) equality of ids, attributes and counters."""
        if self.feature_dim != other.feature_dim or len(self) != len(other) or self.next_id != other.next_id:
            return False
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("ids", "positions", "normals", "radii", "weights", "features"))


def _check_pixel(intr: CameraIntrinsics, px) -> tuple[float, float]:
    u, v = float(px[0]), float(px[1])
    if not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
        raise DomainError(f"pixel {px} outside {intr.width}x{intr.height} image")
    return u, v


def pixel_directions_camera(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unnormalised camera-frame directions with z = 1."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def ray_through_pixel(intr: CameraIntrinsics, pose: Pose, px) -> Ray:
    u, v = _check_pixel(intr, px)
    d = pose.rotation @ pixel_directions_camera(intr, u, v)
    return Ray(pose.center.copy(), d / np.linalg.norm(d))


def pixel_rays(intr: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame unit directions for every pixel, shape (H, W, 3), and the origin."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    d = pixel_directions_camera(intr, u, v) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return pose.center.copy(), d


def unproject(intr: CameraIntrinsics, pose: Pose, px, depth) -> np.ndarray:
    """World point at camera-z ``depth`` through pixel ``px``.

    Vectorised: ``px`` may be (..., 2) and ``depth`` broadcastable to (...).
    """
    px = np.asarray(px, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DomainError("depth must be positive")
    cam = pixel_directions_camera(intr, px[..., 0], px[..., 1]) * depth[..., None]
    return pose.camera_to_world(cam)


def project(intr: CameraIntrinsics, pose: Pose, point):
    """Return ``((u, v), z)`` or ``None`` when the point is behind the camera."""
    p = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if not np.all(np.isfinite(p)):
        raise DomainError("point must be finite")
    if p[2] <= 0:
        return None
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    return (u, v), p[2]


def project_points(intr: CameraIntrinsics, pose: Pose, points: np.ndarray):
    """Vectorised projection: (uv (N, 2), z (N,)); uv is NaN where z <= 0."""
    p = pose.world_to_camera(points)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1)
    uv[z <= 0] = np.nan
    return uv, z
