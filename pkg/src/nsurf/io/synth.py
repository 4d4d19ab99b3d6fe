"""Analytic RGB-D scenes: a room box plus a few boxes/quads, ray traced in closed form.

The generated depth and normals are exact wherever the sensor depth is valid,
so they double as an oracle for geometric tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import CameraIntrinsics, Pose
from ..ingest import Frame

MAX_OBJECTS = 8


@dataclass(frozen=True)
class Texture:
    kind: str = "checker"  # checker | gradient | solid
    color_a: tuple = (0.8, 0.3, 0.2)
    color_b: tuple = (0.2, 0.4, 0.8)
    scale: float = 0.25

    def sample(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        ca, cb = np.asarray(self.color_a), np.asarray(self.color_b)
        if self.kind == "solid":
            return np.broadcast_to(ca, a.shape + (3,)).copy()
        if self.kind == "checker":
            parity = (np.floor(a / self.scale) + np.floor(b / self.scale)) % 2
            return np.where(parity[..., None] > 0, cb, ca)
        if self.kind == "gradient":
            s = 0.5 + 0.5 * np.sin(a / self.scale)[..., None] * np.cos(b / self.scale)[..., None]
            return (1 - s) * ca + s * cb
        raise ValueError(f"unknown texture {self.kind!r}")


@dataclass(frozen=True)
class Box:
    """Solid axis-aligned box seen from outside."""

    lo: tuple
    hi: tuple
    texture: Texture = Texture()


@dataclass(frozen=True)
class Quad:
    """Finite rectangle: centre, unit normal, in-plane axis ``u``, half extents."""

    center: tuple
    normal: tuple
    u_axis: tuple
    half_u: float
    half_v: float
    texture: Texture = Texture()


@dataclass(frozen=True)
class Trajectory:
    kind: str = "pan"  # pan | orbit | lawnmower
    position: tuple = (0.0, 0.0, -0.5)
    yaw_range: tuple = (-40.0, 40.0)  # degrees, pan/orbit
    radius: float = 1.0  # orbit
    target: tuple = (0.0, 0.0, 0.0)  # orbit
    extent: tuple = (-1.0, 1.0)  # lawnmower x range
    rows: int = 2  # lawnmower
    bob: float = 0.05  # vertical wobble, metres


@dataclass(frozen=True)
class SyntheticScene:
    room_lo: tuple | None = (-2.0, -1.2, -2.0)
    room_hi: tuple | None = (2.0, 1.2, 2.0)
    room_textures: tuple = ()
    objects: tuple = ()
    light_dir: tuple = (0.3, 1.0, 0.5)  # direction the light travels
    ambient: float = 0.35
    trajectory: Trajectory = Trajectory()
    intrinsics: CameraIntrinsics = CameraIntrinsics(40.0, 40.0, 23.5, 17.5, 48, 36)
    hole_prob: float = 0.0
    hole_size: int = 1

    def __post_init__(self):
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"at most {MAX_OBJECTS} objects")


_DEFAULT_WALLS = (
    Texture("checker", (0.85, 0.80, 0.70), (0.55, 0.45, 0.35), 0.4),
    Texture("checker", (0.30, 0.55, 0.75), (0.85, 0.85, 0.90), 0.5),
    Texture("gradient", (0.90, 0.70, 0.30), (0.30, 0.60, 0.40), 0.3),
    Texture("gradient", (0.70, 0.30, 0.40), (0.90, 0.85, 0.60), 0.35),
    Texture("checker", (0.40, 0.40, 0.45), (0.75, 0.75, 0.70), 0.5),
    Texture("checker", (0.95, 0.95, 0.90), (0.70, 0.70, 0.75), 0.6),
)


def reference_room(intrinsics: CameraIntrinsics | None = None, seed: int = 0, **kw) -> SyntheticScene:
    """The room used by the acceptance runs; ``seed`` varies colours and furniture."""
    rng = np.random.default_rng(seed)
    intrinsics = intrinsics or CameraIntrinsics(40.0, 40.0, 23.5, 17.5, 48, 36)

    def tex(kind):
        a, b = rng.uniform(0.15, 0.95, 3), rng.uniform(0.15, 0.95, 3)
        return Texture(kind, tuple(a), tuple(b), float(rng.uniform(0.2, 0.5)))

    walls = _DEFAULT_WALLS if seed == 0 else tuple(tex(k) for k in ("checker", "gradient") * 3)
    bx = float(rng.uniform(-0.9, -0.5))
    objects = (
        Box((bx, 0.5, 0.9), (bx + 0.7, 1.2, 1.5), tex("checker")),
        Box((0.6, 0.2, 1.2), (1.1, 1.2, 1.7), tex("gradient")),
        Quad((0.0, -0.3, 1.99), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), 0.6, 0.4, tex("checker")),
    )
    return SyntheticScene(room_textures=walls, objects=objects, intrinsics=intrinsics, **kw)


def fronto_wall(distance: float = 2.0, intrinsics: CameraIntrinsics | None = None, **kw) -> SyntheticScene:
    """Single textured wall facing an identity-pose camera at ``distance`` metres."""
    intrinsics = intrinsics or CameraIntrinsics(40.0, 40.0, 23.5, 17.5, 48, 36)
    wall = Quad((0.0, 0.0, distance), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0), 50.0, 50.0,
                Texture("checker", (0.9, 0.6, 0.3), (0.2, 0.5, 0.7), 0.3))
    traj = Trajectory(kind="pan", position=(0.0, 0.0, 0.0), yaw_range=(0.0, 0.0), bob=0.0)
    return SyntheticScene(room_lo=None, room_hi=None, objects=(wall,), intrinsics=intrinsics, trajectory=traj, **kw)


def poses_for(traj: Trajectory, n: int) -> list[Pose]:
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    poses = []
    for k, f in enumerate(s):
        bob = traj.bob * np.sin(2 * np.pi * f)
        if traj.kind == "pan":
            yaw = np.deg2rad(traj.yaw_range[0] + f * (traj.yaw_range[1] - traj.yaw_range[0]))
            eye = np.asarray(traj.position) + [0.0, bob, 0.0]
            poses.append(Pose.look_at(eye, eye + [np.sin(yaw), 0.0, np.cos(yaw)]))
        elif traj.kind == "orbit":
            yaw = np.deg2rad(traj.yaw_range[0] + f * (traj.yaw_range[1] - traj.yaw_range[0]))
            tgt = np.asarray(traj.target, dtype=float)
            eye = tgt + traj.radius * np.array([np.sin(yaw), 0.0, -np.cos(yaw)]) + [0.0, bob, 0.0]
            poses.append(Pose.look_at(eye, tgt))
        elif traj.kind == "lawnmower":
            row = min(int(f * traj.rows), traj.rows - 1)
            g = f * traj.rows - row
            g = g if row % 2 == 0 else 1 - g
            x = traj.extent[0] + g * (traj.extent[1] - traj.extent[0])
            eye = np.asarray(traj.position) + [x, -0.3 * row + bob, 0.0]
            poses.append(Pose.look_at(eye, eye + [0.0, 0.0, 1.0]))
        else:
            raise ValueError(f"unknown trajectory {traj.kind!r}")
    return poses


def trace(scene: SyntheticScene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit per ray: (t, normal facing the ray, albedo); t = inf on a miss."""
    n = len(dirs)
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_c = np.zeros((n, 3))
    o = np.asarray(origin, dtype=np.float64)

    def take(t, normal, color):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = normal[closer]
        best_c[closer] = color[closer]

    with np.errstate(divide="ignore", invalid="ignore"):
        if scene.room_lo is not None:
            lo, hi = np.asarray(scene.room_lo), np.asarray(scene.room_hi)
            ts = np.where(dirs > 0, (hi - o) / dirs, np.where(dirs < 0, (lo - o) / dirs, np.inf))
            axis = np.argmin(ts, axis=1)
            t = ts[np.arange(n), axis]
            face = 2 * axis + (dirs[np.arange(n), axis] > 0)
            normal = np.zeros((n, 3))
            normal[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
            x = o + t[:, None] * dirs
            color = np.zeros((n, 3))
            textures = scene.room_textures or _DEFAULT_WALLS
            for f in range(6):
                sel = face == f
                a_ax, b_ax = [i for i in range(3) if i != f // 2]
                color[sel] = textures[f % len(textures)].sample(x[sel, a_ax], x[sel, b_ax])
            take(np.where(np.isfinite(t) & (t > 0), t, np.inf), normal, color)
        for obj in scene.objects:
            if isinstance(obj, Box):
                lo, hi = np.asarray(obj.lo), np.asarray(obj.hi)
                t1, t2 = (lo - o) / dirs, (hi - o) / dirs
                tmin, tmax = np.minimum(t1, t2), np.maximum(t1, t2)
                tmin = np.where(np.isnan(tmin), -np.inf, tmin)
                tmax = np.where(np.isnan(tmax), np.inf, tmax)
                axis = np.argmax(tmin, axis=1)
                t_in = tmin[np.arange(n), axis]
                hit = (t_in <= tmax.min(axis=1)) & (t_in > 0)
                normal = np.zeros((n, 3))
                normal[np.arange(n), axis] = -np.sign(dirs[np.arange(n), axis])
                x = o + np.where(hit, t_in, 0)[:, None] * dirs
                color = np.zeros((n, 3))
                for ax in range(3):
                    sel = axis == ax
                    a_ax, b_ax = [i for i in range(3) if i != ax]
                    color[sel] = obj.texture.sample(x[sel, a_ax], x[sel, b_ax])
                take(np.where(hit, t_in, np.inf), normal, color)
            elif isinstance(obj, Quad):
                c, nq, ua = np.asarray(obj.center, float), np.asarray(obj.normal, float), np.asarray(obj.u_axis, float)
                va = np.cross(nq, ua)
                denom = dirs @ nq
                t = ((c - o) @ nq) / denom
                x = o + t[:, None] * dirs
                lu, lv = (x - c) @ ua, (x - c) @ va
                hit = (denom != 0) & (t > 0) & (np.abs(lu) <= obj.half_u) & (np.abs(lv) <= obj.half_v)
                normal = np.where((denom < 0)[:, None], nq, -nq)
                take(np.where(hit, t, np.inf), normal, obj.texture.sample(lu, lv))
            else:
                raise TypeError(f"unsupported object {obj!r}")
    return best_t, best_n, best_c


def hole_mask(rng, shape, prob: float, size: int) -> np.ndarray:
    """Boolean drop mask whose expected coverage is ``prob``."""
    if prob <= 0:
        return np.zeros(shape, dtype=bool)
    if size <= 1:
        return rng.random(shape) < prob
    q = 1.0 - (1.0 - prob) ** (1.0 / (size * size))
    seeds = rng.random(shape) < q
    out = np.zeros(shape, dtype=bool)
    H, W = shape
    for dy in range(size):
        for dx in range(size):
            out[dy:, dx:] |= seeds[:H - dy, :W - dx]
    return out


@dataclass
class RenderedFrame:
    frame: Frame
    depth: np.ndarray  # exact camera-z depth, 0 on a miss
    normals: np.ndarray  # exact world normals facing the camera


def render_view(scene: SyntheticScene, pose: Pose, rng=None, index: int = 0, intrinsics=None) -> RenderedFrame:
    intr = intrinsics or scene.intrinsics
    H, W = intr.height, intr.width
    v, u = np.mgrid[0:H, 0:W]
    cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u, dtype=float)], axis=-1)
    dirs = cam.reshape(-1, 3) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, normal, albedo = trace(scene, pose.center, dirs)
    miss = ~np.isfinite(t)
    depth = np.where(miss, 0.0, t * (dirs @ pose.rotation[:, 2]))
    light = -np.asarray(scene.light_dir, float)
    light /= np.linalg.norm(light)
    shade = scene.ambient + (1 - scene.ambient) * np.clip(normal @ light, 0, None)
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
    rgb[miss] = 0.0
    depth = depth.reshape(H, W)
    sensor = depth.copy()
    if rng is not None and scene.hole_prob > 0:
        sensor[hole_mask(rng, (H, W), scene.hole_prob, scene.hole_size)] = 0.0
    frame = Frame(rgb.reshape(H, W, 3), sensor, intr, pose, index)
    return RenderedFrame(frame, depth, normal.reshape(H, W, 3))


def synth_generate(scene: SyntheticScene, n_frames: int, seed: int = 0, out_path=None) -> list[RenderedFrame]:
    """Ray trace ``n_frames`` along the scene trajectory; optionally write a dataset directory."""
    rng = np.random.default_rng(seed)
    frames = [render_view(scene, pose, rng, i) for i, pose in enumerate(poses_for(scene.trajectory, n_frames))]
    if out_path is not None:
        from .dataset import write_dataset

        write_dataset(out_path, frames)
    return frames
