"""Surfel rasterization into per-pixel, depth-sorted ray/disk intersection lists.

Both association (small cap) and rendering (large cap) use :func:`rasterize`.
Culling uses a conservative screen-space box around each disk's bounding
sphere; membership is decided by the exact ray/disk test, so the result is
exactly the ``cap`` nearest intersections per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraIntrinsics, Pose, Ray, Surfel, SurfelMap, pixel_rays

T_NEAR = 1e-4
ASSOCIATION_CAP = 8
RENDER_CAP = 80
_PAIR_CHUNK = 1 << 22


@dataclass(frozen=True)
class SurfelHit:
    surfel_id: int
    t: float
    hit_point: np.ndarray
    center_offset: float


def ray_disk_intersect(ray: Ray, surfel: Surfel, t_near: float = T_NEAR) -> SurfelHit | None:
    o = np.asarray(ray.origin, dtype=np.float64)
    d = np.asarray(ray.direction, dtype=np.float64)
    p = np.asarray(surfel.position, dtype=np.float64)
    n = np.asarray(surfel.normal, dtype=np.float64)
    denom = float(d @ n)
    if denom == 0.0:
        return None
    t = float((p - o) @ n) / denom
    if not t > t_near:
        return None
    x = o + t * d
    off = float(np.sqrt(np.sum((x - p) ** 2)))
    if off > surfel.radius:
        return None
    return SurfelHit(int(surfel.id), t, x, off)


class PixelSurfelBuffer:
    """Flat, pixel-major storage of the capped hit lists.

    Hits of pixel ``k = v * width + u`` occupy ``offsets[k]:offsets[k + 1]`` and
    are sorted by (t, surfel id).
    """

    def __init__(self, height, width, cap, offsets, rows, ids, t, points, center_offsets, overflow=0):
        self.height, self.width, self.cap = height, width, cap
        self.offsets = offsets
        self.rows = rows
        self.ids = ids
        self.t = t
        self.points = points
        self.center_offsets = center_offsets
        self.overflow = overflow

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    @property
    def num_hits(self) -> int:
        return len(self.rows)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def pixel_of_hit(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_pixels), self.counts())

    def hits_at(self, u: int, v: int) -> list[SurfelHit]:
        k = v * self.width + u
        s = slice(self.offsets[k], self.offsets[k + 1])
        return [SurfelHit(int(i), float(t), x.copy(), float(c))
                for i, t, x, c in zip(self.ids[s], self.t[s], self.points[s], self.center_offsets[s])]

    def padded_index(self, pixels: np.ndarray | None = None) -> np.ndarray:
        """(P, K) flat-hit indices, -1 where a pixel has fewer than K hits."""
        counts = self.counts()
        if pixels is None:
            pixels = np.arange(self.num_pixels)
        counts = counts[pixels]
        K = max(1, int(counts.max()) if len(counts) else 1)
        slot = np.arange(K)
        idx = self.offsets[pixels][:, None] + slot[None, :]
        return np.where(slot[None, :] < counts[:, None], idx, -1)


def _bounding_boxes(centers_cam: np.ndarray, radii: np.ndarray, intr: CameraIntrinsics, t_near: float):
    """Conservative inclusive pixel boxes (u0, u1, v0, v1) of each disk's bounding sphere."""
    X, Y, Z = centers_cam.T
    r = radii
    W, H = intr.width, intr.height
    u0 = np.zeros(len(r))
    u1 = np.full(len(r), W - 1.0)
    v0 = np.zeros(len(r))
    v1 = np.full(len(r), H - 1.0)
    finite = Z - r > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        zn, zf = Z - r, Z + r
        for lo, hi, c, f, ctr in ((u0, u1, X, intr.fx, intr.cx), (v0, v1, Y, intr.fy, intr.cy)):
            cands = np.stack([(c - r) / zn, (c - r) / zf, (c + r) / zn, (c + r) / zf])
            lo[finite] = (f * cands.min(axis=0) + ctr)[finite]
            hi[finite] = (f * cands.max(axis=0) + ctr)[finite]
    margin = 1e-6
    boxes = np.stack([np.ceil(u0 - margin), np.floor(u1 + margin), np.ceil(v0 - margin), np.floor(v1 + margin)], axis=1)
    boxes[:, [0, 2]] = np.maximum(boxes[:, [0, 2]], 0)
    boxes[:, 1] = np.minimum(boxes[:, 1], W - 1)
    boxes[:, 3] = np.minimum(boxes[:, 3], H - 1)
    # a hit needs camera z > 0, so a disk entirely at z <= 0 is culled
    visible = (Z + r > 0) & (boxes[:, 0] <= boxes[:, 1]) & (boxes[:, 2] <= boxes[:, 3])
    return boxes.astype(np.int64), visible


def rasterize(smap: SurfelMap, intr: CameraIntrinsics, pose: Pose, cap: int = RENDER_CAP,
              t_near: float = T_NEAR) -> PixelSurfelBuffer:
    if cap < 1:
        raise ValueError("cap must be >= 1")
    H, W = intr.height, intr.width
    origin, dirs = pixel_rays(intr, pose)
    dirs = dirs.reshape(-1, 3)
    P = smap.positions.astype(np.float64)
    N = smap.normals.astype(np.float64)
    R = smap.radii.astype(np.float64)
    boxes, visible = _bounding_boxes(pose.world_to_camera(P), R, intr, t_near)
    rows_vis = np.flatnonzero(visible)
    b = boxes[rows_vis]
    bw = b[:, 1] - b[:, 0] + 1
    npix = bw * (b[:, 3] - b[:, 2] + 1)

    hit_pix, hit_row, hit_t, hit_x, hit_off = [], [], [], [], []
    cum = np.cumsum(npix)
    start = 0
    while start < len(rows_vis):
        # bound the number of candidate (surfel, pixel) pairs per batch
        end = max(start + 1, int(np.searchsorted(cum, cum[start] - npix[start] + _PAIR_CHUNK, side="right")))
        sel = slice(start, end)
        start = end
        counts = npix[sel]
        row = np.repeat(rows_vis[sel], counts)
        first = np.cumsum(counts) - counts
        local = np.arange(counts.sum()) - np.repeat(first, counts)
        w = np.repeat(bw[sel], counts)
        u = np.repeat(b[sel, 0], counts) + local % w
        v = np.repeat(b[sel, 2], counts) + local // w
        pix = v * W + u
        d = dirs[pix]
        n = N[row]
        p = P[row]
        denom = np.einsum("ij,ij->i", d, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.einsum("ij,ij->i", p - origin, n) / denom
        ok = (denom != 0) & (t > t_near)
        x = origin + t[ok, None] * d[ok]
        off = np.sqrt(np.sum((x - p[ok]) ** 2, axis=1))
        inside = off <= R[row[ok]]
        keep = np.flatnonzero(ok)[inside]
        hit_pix.append(pix[keep])
        hit_row.append(row[keep])
        hit_t.append(t[keep])
        hit_x.append(x[inside])
        hit_off.append(off[inside])

    if hit_pix:
        pix = np.concatenate(hit_pix)
        row = np.concatenate(hit_row)
        t = np.concatenate(hit_t)
        x = np.concatenate(hit_x)
        off = np.concatenate(hit_off)
    else:
        pix = row = np.zeros(0, dtype=np.int64)
        t = off = np.zeros(0)
        x = np.zeros((0, 3))
    ids = smap.ids[row]
    order = np.lexsort((ids, t, pix))
    pix, row, ids, t, x, off = pix[order], row[order], ids[order], t[order], x[order], off[order]
    all_counts = np.bincount(pix, minlength=H * W)
    first = np.cumsum(all_counts) - all_counts
    rank = np.arange(len(pix)) - first[pix]
    keep = rank < cap
    counts = np.minimum(all_counts, cap)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return PixelSurfelBuffer(H, W, cap, offsets, row[keep], ids[keep], t[keep], x[keep], off[keep],
                             overflow=int((all_counts - counts).sum()))


def raster_stats(buffer: PixelSurfelBuffer) -> tuple[float, int, float]:
    """(mean hits per pixel, max hits per pixel, fraction of pixels with any hit)."""
    c = buffer.counts()
    if not len(c):
        return 0.0, 0, 0.0
    return float(c.mean()), int(c.max()), float((c > 0).mean())
