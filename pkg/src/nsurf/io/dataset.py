"""On-disk RGB-D sequences.

Layout::

    intrinsics.txt              fx fy cx cy width height
    frames/NNNNNN.color.png     8-bit RGB
    frames/NNNNNN.depth.png     16-bit millimetres, 0 = invalid
    frames/NNNNNN.pose.txt      4x4 camera-to-world, row-major, metres
    frames/NNNNNN.gt.npz        optional exact depth/normals (synthetic only)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..core import CameraIntrinsics, DomainError, Pose
from ..ingest import Frame

MAX_DEPTH_M = 65.535


class DatasetError(ValueError):
    pass


def read_intrinsics(path) -> CameraIntrinsics:
    path = Path(path)
    try:
        vals = path.read_text().split()
        fx, fy, cx, cy = map(float, vals[:4])
        w, h = int(vals[4]), int(vals[5])
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetError(f"{path}: cannot read intrinsics ({exc})") from exc


def _frame_stems(root: Path) -> list[str]:
    stems = sorted(p.name[:-len(".color.png")] for p in (root / "frames").glob("*.color.png"))
    for i, s in enumerate(stems):
        if s != f"{i:06d}":
            raise DatasetError(f"{root / 'frames'}: frame indices not contiguous from 0 (found {s})")
    return stems


def frame_count(path) -> int:
    return len(_frame_stems(Path(path)))


def load_frame(root, index: int, intr: CameraIntrinsics | None = None) -> Frame:
    root = Path(root)
    intr = intr or read_intrinsics(root / "intrinsics.txt")
    base = root / "frames" / f"{index:06d}"
    try:
        rgb = np.asarray(Image.open(f"{base}.color.png").convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"{base}.color.png: {exc}") from exc
    try:
        depth_mm = np.asarray(Image.open(f"{base}.depth.png"), dtype=np.float64)
    except OSError as exc:
        raise DatasetError(f"{base}.depth.png: {exc}") from exc
    try:
        m = np.loadtxt(f"{base}.pose.txt").reshape(4, 4)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"{base}.pose.txt: {exc}") from exc
    try:
        pose = Pose.from_matrix(m).validate(1e-5)
    except DomainError as exc:
        raise DatasetError(f"{base}.pose.txt: {exc}") from exc
    if depth_mm.shape != (intr.height, intr.width) or rgb.shape[:2] != depth_mm.shape:
        raise DatasetError(f"{base}: image size disagrees with intrinsics")
    return Frame(rgb, depth_mm / 1000.0, intr, pose, index)


def load_dataset(path):
    """Yield frames in index order; depth converted from millimetres to metres."""
    root = Path(path)
    intr = read_intrinsics(root / "intrinsics.txt")
    for i, _ in enumerate(_frame_stems(root)):
        yield load_frame(root, i, intr)


def load_ground_truth(path, index: int):
    with np.load(Path(path) / "frames" / f"{index:06d}.gt.npz") as z:
        return z["depth"], z["normals"]


def write_dataset(path, rendered) -> None:
    """Write ``RenderedFrame``-like objects (``.frame``, ``.depth``, ``.normals``) to ``path``."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    intr = rendered[0].frame.intrinsics
    (root / "intrinsics.txt").write_text(
        f"{intr.fx:.9g} {intr.fy:.9g} {intr.cx:.9g} {intr.cy:.9g} {intr.width} {intr.height}\n")
    for r in rendered:
        f = r.frame
        base = root / "frames" / f"{f.index:06d}"
        Image.fromarray(np.round(np.clip(f.rgb, 0, 1) * 255).astype(np.uint8)).save(f"{base}.color.png")
        save_depth_png(f.sensor_depth, f"{base}.depth.png")
        np.savetxt(f"{base}.pose.txt", f.pose.matrix(), fmt="%.12f")
        np.savez(f"{base}.gt.npz", depth=r.depth, normals=r.normals)


def save_depth_png(depth_m: np.ndarray, path) -> None:
    mm = np.round(np.clip(depth_m, 0, MAX_DEPTH_M) * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(path)


def save_image_png(img: np.ndarray, path) -> None:
    Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(path)


def load_image_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
