"""Build a local surfel field from one posed RGB-D frame."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, DomainError, Pose, SurfelMap, unproject
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import learned_depth_residual, pixel_features

# radius/weight initialisation constants
RADIUS_SCALE = np.sqrt(2.0)
GRAZING_COS = np.cos(np.deg2rad(75.0))
WEIGHT_SIGMA = 0.6


class NoDepthSupport(DomainError):
    pass


@dataclass
class Frame:
    rgb: np.ndarray
    sensor_depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    index: int = 0
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.sensor_depth = np.asarray(self.sensor_depth, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = self.sensor_depth > 0
        H, W = self.sensor_depth.shape
        if self.rgb.shape != (H, W, 3) or (H, W) != (self.intrinsics.height, self.intrinsics.width):
            raise DomainError("rgb, depth and intrinsics disagree on image size")
        if not np.array_equal(self.valid_mask, self.sensor_depth > 0):
            raise DomainError("valid_mask must be true exactly where depth > 0")
        if self.rgb.min(initial=0) < 0 or self.rgb.max(initial=0) > 1:
            raise DomainError("rgb values must lie in [0, 1]")


@dataclass(frozen=True)
class DepthRefiner:
    """``identity`` keeps holes; ``diffusion`` fills them; ``learned`` adds a trained correction."""

    variant: str = "diffusion"
    max_iters: int = 500
    tol: float = 1e-4

    def __post_init__(self):
        if self.variant not in ("identity", "diffusion", "learned"):
            raise ValueError(f"unknown depth refiner {self.variant!r}")


def diffusion_fill(depth: np.ndarray, mask: np.ndarray, max_iters: int = 500, tol: float = 1e-4) -> np.ndarray:
    """Fill invalid pixels by repeated 4-neighbour averaging with valid pixels held fixed."""
    out = np.where(mask, depth, depth[mask].mean()).astype(np.float64)
    holes = ~mask
    if not holes.any():
        return out
    H, W = out.shape
    ones = np.pad(np.ones((H, W)), 1)
    nbr_count = ones[:-2, 1:-1] + ones[2:, 1:-1] + ones[1:-1, :-2] + ones[1:-1, 2:]
    for _ in range(max_iters):
        p = np.pad(out, 1)
        avg = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]) / nbr_count
        change = np.abs(avg[holes] - out[holes]).max()
        out[holes] = avg[holes]
        if change < tol:
            break
    return out


def refine_depth(refiner: DepthRefiner, frame: Frame, bundle=None) -> np.ndarray:
    if not frame.valid_mask.any():
        raise NoDepthSupport("no depth support: every depth pixel is invalid")
    if refiner.variant == "identity":
        return frame.sensor_depth.copy()
    filled = diffusion_fill(frame.sensor_depth, frame.valid_mask, refiner.max_iters, refiner.tol)
    if refiner.variant == "diffusion":
        return filled
    with ag.no_grad():
        return refine_depth_tensor(refiner, frame, bundle.tensors(), filled).data.astype(np.float64)


def refine_depth_tensor(refiner: DepthRefiner, frame: Frame, P, filled: np.ndarray | None = None) -> Tensor:
    """Learned refinement as a differentiable map of the refiner parameters."""
    if filled is None:
        filled = diffusion_fill(frame.sensor_depth, frame.valid_mask, refiner.max_iters, refiner.tol)
    dtype = P["refiner.enc.w"].dtype
    res = learned_depth_residual(P, filled.astype(dtype), frame.valid_mask, frame.rgb.astype(dtype))
    return ag.mul(Tensor(filled.astype(dtype)), ag.exp(res))


def estimate_normals(depth: np.ndarray, intr: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """(H, W, 3) world-frame unit normals facing the camera, from central differences."""
    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    pts = unproject(intr, pose, np.stack([u, v], axis=-1), np.maximum(depth, 1e-12))
    pad = np.pad(pts, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = pad[1:-1, 2:] - pad[1:-1, :-2]
    dy = pad[2:, 1:-1] - pad[:-2, 1:-1]
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    to_cam = pose.center - pts
    to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    n = np.where(degenerate[..., None], to_cam, n / np.where(norm > 0, norm, 1.0))
    flip = np.sum(n * to_cam, axis=-1) < 0
    n[flip] *= -1
    return n


def init_radius_weight(depth, normal, px, intr: CameraIntrinsics, pose: Pose | None = None, stride: int = 1):
    """Surfel radius (m) and confidence weight; vectorised over leading axes.

    ``stride`` above 2 widens the radius so sparser samples still tile the image;
    at stride 1 and 2 the plain per-pixel radius already does.
    """
    pose = pose or Pose.identity()
    depth = np.asarray(depth, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    pts = unproject(intr, pose, px, depth)
    view = pts - pose.center
    view /= np.linalg.norm(view, axis=-1, keepdims=True)
    cos = np.maximum(np.abs(np.sum(normal * view, axis=-1)), GRAZING_COS)
    radius = max(1.0, stride / 2.0) * RADIUS_SCALE * depth / intr.f_mean / cos
    corners = np.array([[0, 0], [intr.width - 1, 0], [0, intr.height - 1], [intr.width - 1, intr.height - 1]], float)
    c = np.array([intr.cx, intr.cy])
    far = max(np.linalg.norm(corners - c, axis=1).max(), 1e-12)
    gamma = np.linalg.norm(px - c, axis=-1) / far
    weight = np.exp(-gamma ** 2 / (2 * WEIGHT_SIGMA ** 2))
    return radius, weight


@dataclass
class LocalField:
    """Local surfels plus the source pixel of each (rows, cols), in scan order."""

    surfels: SurfelMap
    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray = field(repr=False)


def sample_grid(H: int, W: int, stride: int):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rr, cc = np.meshgrid(np.arange(0, H, stride), np.arange(0, W, stride), indexing="ij")
    return rr.ravel(), cc.ravel()


def local_geometry(frame: Frame, refiner: DepthRefiner, stride: int = 2, bundle=None,
                   depth: np.ndarray | None = None, dtype=np.float32) -> LocalField:
    """Geometry-only local field; features are left at zero."""
    if depth is None:
        depth = refine_depth(refiner, frame, bundle)
    intr, pose = frame.intrinsics, frame.pose
    rows, cols = sample_grid(intr.height, intr.width, stride)
    keep = depth[rows, cols] > 0
    rows, cols = rows[keep], cols[keep]
    d = depth[rows, cols]
    normals = estimate_normals(depth, intr, pose)[rows, cols]
    px = np.stack([cols, rows], axis=1).astype(np.float64)
    positions = unproject(intr, pose, px, d)
    radii, weights = init_radius_weight(d, normals, px, intr, pose, stride)
    fdim = bundle.feature_dim if bundle is not None else 32
    smap = SurfelMap.from_arrays(positions, normals, radii, weights, np.zeros((len(d), fdim)), dtype=dtype)
    return LocalField(smap, rows, cols, depth)


def build_local_surfels(frame: Frame, refiner: DepthRefiner, bundle, stride: int = 2,
                        dtype=None) -> LocalField:
    """One surfel per sampled pixel with geometry and extracted features."""
    dtype = dtype or bundle.dtype
    local = local_geometry(frame, refiner, stride, bundle, dtype=dtype)
    with ag.no_grad():
        feats = pixel_features(bundle.tensors(), frame.rgb, local.rows, local.cols)
    local.surfels.features = feats.data.astype(dtype)
    return local
