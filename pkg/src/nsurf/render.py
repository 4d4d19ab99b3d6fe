"""Rasterization-guided neural rendering of a surfel map.

Each pixel ray is shaded only at its intersections with surfel disks. A hit's
feature is the view-conditioned surfel feature scaled by how close the hit is
to the disk centre; density and colour come from small MLPs, and hits are
alpha-composited front to back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CameraIntrinsics, Pose, Ray, Surfel, SurfelMap, pixel_rays
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import dense, mlp
from .raster import RENDER_CAP, PixelSurfelBuffer, SurfelHit, _bounding_boxes, rasterize


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class PositionalEmbedding:
    num_bands: int = 5
    include_input: bool = True

    def width(self, dims: int) -> int:
        return dims * (2 * self.num_bands + int(self.include_input))


@dataclass(frozen=True)
class RenderConfig:
    max_hits: int = RENDER_CAP
    last_delta: float = 0.01
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.max_hits < 1 or not self.last_delta > 0:
            raise ValueError("max_hits must be >= 1 and last_delta > 0")


def positional_encode(x, emb: PositionalEmbedding = PositionalEmbedding()) -> np.ndarray:
    """Per component: [x, sin(2^k pi x), cos(2^k pi x) for k < num_bands]; last axis is encoded."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x[None]
    freqs = (2.0 ** np.arange(emb.num_bands)) * np.pi
    ang = x[..., None] * freqs
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(x.shape + (2 * emb.num_bands,))
    if emb.include_input:
        sc = np.concatenate([x[..., None], sc], axis=-1)
    return sc.reshape(x.shape[:-1] + (-1,))


def interpolation_weight(center_offset, radius):
    """(r - |x - p|) / r: 1 at the disk centre, 0 on the rim."""
    return (np.asarray(radius, dtype=np.float64) - center_offset) / radius


def _view_features(P, feats: Tensor, dirs, normals, weights, emb) -> Tensor:
    dtype = feats.dtype
    geo = np.concatenate([positional_encode(dirs, emb), positional_encode(np.asarray(weights)[:, None], emb),
                          positional_encode(normals, emb), positional_encode(dirs - normals, emb)], axis=1)
    return mlp(P, "f_f", ag.concat([feats, Tensor(geo.astype(dtype))], axis=1), 2)


def shade(P, h: Tensor, points, dirs, emb, dtype=None):
    """Density and colour from interpolated features ``h`` (n, 256)."""
    dtype = dtype or h.dtype
    sigma = ag.relu(dense(P, "f_sigma.0", ag.concat([h, Tensor(positional_encode(points, emb).astype(dtype))], axis=1)))
    rgb = ag.sigmoid(mlp(P, "f_r", ag.concat([h, Tensor(positional_encode(dirs, emb).astype(dtype))], axis=1), 4))
    return ag.reshape(sigma, (-1,)), rgb


def shade_hits(P, feats: Tensor, dirs, normals, weights, points, interp, emb):
    """Per-hit (sigma (n,), rgb (n, 3)) for gathered surfel features ``feats`` (n, F)."""
    h = ag.mul(_view_features(P, feats, dirs, normals, weights, emb), Tensor(np.asarray(interp, dtype=feats.dtype)[:, None]))
    return shade(P, h, points, dirs, emb)


def interpolate_feature(hit: SurfelHit, surfel: Surfel, view_dir, P, emb=PositionalEmbedding()) -> np.ndarray:
    """View-dependent feature (256,) at a single hit."""
    dtype = P["f_f.0.w"].dtype
    feats = Tensor(np.asarray(surfel.feature, dtype=dtype)[None])
    h = _view_features(P, feats, np.asarray(view_dir, dtype=np.float64)[None], np.asarray(surfel.normal)[None],
                       np.array([surfel.weight]), emb)
    return (interpolation_weight(hit.center_offset, surfel.radius) * h.data[0]).astype(dtype)


def shade_point(x, feat, view_dir, P, emb=PositionalEmbedding()) -> tuple[float, np.ndarray]:
    dtype = P["f_r.0.w"].dtype
    sigma, rgb = shade(P, Tensor(np.asarray(feat, dtype=dtype)[None]), np.asarray(x, dtype=np.float64)[None],
                       np.asarray(view_dir, dtype=np.float64)[None], emb)
    return float(sigma.data[0]), rgb.data[0]


def hit_deltas(t: np.ndarray, valid: np.ndarray, last_delta: float) -> np.ndarray:
    """Spacing to the next hit on the same ray; ``last_delta`` after the final hit. (P, K)."""
    delta = np.zeros_like(t)
    if t.shape[1] > 1:
        nxt = valid[:, 1:]
        delta[:, :-1] = np.where(nxt, t[:, 1:] - t[:, :-1], 0.0)
    last = valid & ~np.concatenate([valid[:, 1:], np.zeros((len(t), 1), dtype=bool)], axis=1)
    delta[last] = last_delta
    return np.where(valid, delta, 0.0)


def composite_padded(sigma: Tensor, rgb: Tensor, delta: np.ndarray, background) -> Tensor:
    """Front-to-back compositing. sigma (P, K), rgb (P, K, 3), delta (P, K) -> (P, 3).

    Padding slots must carry delta = 0.
    """
    dtype = sigma.dtype
    sd = ag.mul(sigma, Tensor(delta.astype(dtype)))
    # exclusive prefix sum, so transmittance is exactly non-increasing in floating point
    shifted = ag.getitem(ag.cumsum(sd, axis=1), (slice(None), slice(None, -1)))
    before = ag.concat([Tensor(np.zeros((sd.shape[0], 1), dtype=dtype)), shifted], axis=1)
    trans = ag.exp(ag.mul(before, -1.0))
    alpha = ag.sub(1.0, ag.exp(ag.mul(sd, -1.0)))
    w = ag.mul(trans, alpha)
    color = ag.tsum(ag.mul(ag.reshape(w, w.shape + (1,)), rgb), axis=1)
    residual = ag.exp(ag.mul(ag.tsum(sd, axis=1), -1.0))
    bg = Tensor(np.asarray(background, dtype=dtype)[None, :])
    return ag.add(color, ag.mul(ag.reshape(residual, (-1, 1)), bg))


def composite(t, sigmas, rgbs, cfg: RenderConfig = RenderConfig(), return_weights: bool = False):
    """Composite one ray's hits, given sorted ray parameters ``t``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ContractError("hits must be sorted by ascending t")
    if len(t) > cfg.max_hits:
        raise ContractError(f"{len(t)} hits exceed max_hits={cfg.max_hits}")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    rgbs = np.asarray(rgbs, dtype=np.float64).reshape(len(t), 3)
    if not len(t):
        return (np.asarray(cfg.background, dtype=np.float64), np.zeros(0), np.zeros(0)) if return_weights \
            else np.asarray(cfg.background, dtype=np.float64)
    delta = np.append(np.diff(t), cfg.last_delta)
    sd = sigmas * delta
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(sd)[:-1]]))
    w = trans * (1.0 - np.exp(-sd))
    c = (w[:, None] * rgbs).sum(axis=0) + np.exp(-sd.sum()) * np.asarray(cfg.background, dtype=np.float64)
    return (c, w, trans) if return_weights else c


def render_buffer(P, features: Tensor, smap: SurfelMap, buffer: PixelSurfelBuffer, origin: np.ndarray,
                  emb: PositionalEmbedding, cfg: RenderConfig, pixels: np.ndarray | None = None) -> Tensor:
    """Differentiable colours (npix, 3) for ``pixels`` (flat indices) of a rasterized view.

    ``features`` holds one row per map row; geometry is taken from ``smap``.
    """
    dtype = features.dtype
    if pixels is None:
        pixels = np.arange(buffer.num_pixels)
    idx = buffer.padded_index(pixels)
    valid = idx >= 0
    flat = idx[valid]
    npix, K = idx.shape
    if not len(flat):
        return Tensor(np.broadcast_to(np.asarray(cfg.background, dtype=dtype), (npix, 3)).copy())
    rows = buffer.rows[flat]
    pts = buffer.points[flat]
    dirs = pts - origin
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    normals = smap.normals[rows].astype(np.float64)
    interp = interpolation_weight(buffer.center_offsets[flat], smap.radii[rows].astype(np.float64))
    sigma, rgb = shade_hits(P, ag.take_rows(features, rows), dirs, normals, smap.weights[rows], pts, interp, emb)
    # scatter flat hits into the padded (P, K) layout; slot n is an all-zero row
    slot = np.full(idx.shape, len(flat))
    slot[valid] = np.arange(len(flat))
    sigma_pad = ag.take_rows(ag.concat([sigma, Tensor(np.zeros(1, dtype=dtype))], axis=0), slot)
    rgb_pad = ag.take_rows(ag.concat([rgb, Tensor(np.zeros((1, 3), dtype=dtype))], axis=0), slot)
    t = np.where(valid, buffer.t[np.maximum(idx, 0)], 0.0)
    delta = hit_deltas(t, valid, cfg.last_delta)
    return composite_padded(sigma_pad, rgb_pad, delta, cfg.background)


def render_image(smap: SurfelMap, intr: CameraIntrinsics, pose: Pose, bundle, emb=None,
                 cfg: RenderConfig = RenderConfig(), buffer: PixelSurfelBuffer | None = None,
                 chunk: int = 8192) -> np.ndarray:
    """(H, W, 3) image in [0, 1]; pixels with no hits get the background colour."""
    emb = emb or PositionalEmbedding(bundle.num_bands, bundle.include_input)
    if buffer is None:
        buffer = rasterize(smap, intr, pose, cfg.max_hits)
    P = bundle.tensors()
    feats = Tensor(smap.features.astype(bundle.dtype))
    out = np.empty((buffer.num_pixels, 3), dtype=np.float64)
    # chunk by hit count to bound activation memory
    cum = np.cumsum(buffer.counts())
    n = buffer.num_pixels
    start = 0
    with ag.no_grad():
        while start < n:
            base = cum[start - 1] if start else 0
            end = max(start + 1, int(np.searchsorted(cum, base + chunk, side="right")))
            sel = np.arange(start, min(end, n))
            out[sel] = render_buffer(P, feats, smap, buffer, pose.center, emb, cfg, sel).data
            start = end
    return np.clip(out.reshape(intr.height, intr.width, 3), 0.0, 1.0)


def render_image_dense_baseline(smap: SurfelMap, intr: CameraIntrinsics, pose: Pose, bundle, emb=None,
                                step: float = 0.01, near: float = 0.05, far: float = 6.0,
                                background=(0.0, 0.0, 0.0), chunk: int = 32768) -> np.ndarray:
    """Reference NeRF-style renderer: dense ray marching with a network evaluation per sample.

    Samples sit at camera depths ``near + (k + 1/2) * step`` below ``far`` on
    every ray, the usual forward-facing sampling. A sample's feature sums the
    interpolated features of every surfel whose slab (|plane distance| <= step/2,
    in-plane offset <= radius) contains it; samples outside all slabs are empty
    (zero density). Only used to compare speed and output against
    :func:`render_image`.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    emb = emb or PositionalEmbedding(bundle.num_bands, bundle.include_input)
    H, W = intr.height, intr.width
    origin, dirs = pixel_rays(intr, pose)
    dirs = dirs.reshape(-1, 3)
    zs = np.arange(near + 0.5 * step, far, step)
    S = len(zs)
    bg = np.asarray(background, dtype=np.float64)
    image = np.tile(bg, (H * W, 1))
    if not len(smap) or not S:
        return image.reshape(H, W, 3)
    Pm = smap.positions.astype(np.float64)
    Nm = smap.normals.astype(np.float64)
    Rm = smap.radii.astype(np.float64)
    # candidate surfels per ray from the conservative screen boxes of the slab-inflated disks
    boxes, visible = _bounding_boxes(pose.world_to_camera(Pm), Rm + step, intr, near)
    rows_vis = np.flatnonzero(visible)
    b = boxes[rows_vis]
    bw = b[:, 1] - b[:, 0] + 1
    cnt = bw * (b[:, 3] - b[:, 2] + 1)
    first = np.cumsum(cnt) - cnt
    local = np.arange(cnt.sum()) - np.repeat(first, cnt)
    pair_row = np.repeat(rows_vis, cnt)
    w_ = np.repeat(bw, cnt)
    pair_pix = (np.repeat(b[:, 2], cnt) + local // w_) * W + np.repeat(b[:, 0], cnt) + local % w_
    order = np.argsort(pair_pix, kind="stable")
    pair_pix, pair_row = pair_pix[order], pair_row[order]
    pix_start = np.searchsorted(pair_pix, np.arange(H * W + 1))

    P = bundle.tensors()
    dtype = bundle.dtype
    feats_all = smap.features.astype(dtype)
    rays_per_chunk = max(1, chunk // S)
    with ag.no_grad():
        for r0 in range(0, H * W, rays_per_chunk):
            r1 = min(H * W, r0 + rays_per_chunk)
            nr = r1 - r0
            d = dirs[r0:r1]
            dz = d @ pose.rotation[:, 2]  # camera-z per unit ray length
            x = origin + (zs[None, :] / dz[:, None])[..., None] * d[:, None, :]  # (nr, S, 3)
            # slab membership of every (ray, candidate, sample) triple
            p0, p1 = pix_start[r0], pix_start[r1]
            cp, cr = pair_pix[p0:p1] - r0, pair_row[p0:p1]
            rel = x[cp] - Pm[cr][:, None, :]  # (npairs, S, 3)
            sd = np.einsum("psk,pk->ps", rel, Nm[cr])
            inplane = rel - sd[..., None] * Nm[cr][:, None, :]
            off = np.sqrt(np.sum(inplane ** 2, axis=-1))
            inside = (np.abs(sd) <= 0.5 * step) & (off <= Rm[cr][:, None])
            pi, si = np.nonzero(inside)
            h = np.zeros((nr * S, bundle.params["f_f.1.w"].shape[1]), dtype=dtype)
            occupied = np.zeros(nr * S, dtype=bool)
            if len(pi):
                rows = cr[pi]
                sample = cp[pi] * S + si
                dd = d[cp[pi]]
                contrib = _view_features(P, Tensor(feats_all[rows]), dd, Nm[rows], smap.weights[rows], emb).data
                contrib *= interpolation_weight(off[pi, si], Rm[rows]).astype(dtype)[:, None]
                np.add.at(h, sample, contrib)
                occupied[sample] = True
            sigma, rgb = shade(P, Tensor(h), x.reshape(-1, 3), np.repeat(d, S, axis=0), emb)
            sig = np.where(occupied, sigma.data, 0.0).reshape(nr, S)
            sdelta = sig * (step / dz)[:, None]  # ray length between samples
            trans = np.exp(-np.concatenate([np.zeros((nr, 1)), np.cumsum(sdelta, axis=1)[:, :-1]], axis=1))
            wts = trans * (1.0 - np.exp(-sdelta))
            col = np.einsum("rs,rsk->rk", wts, rgb.data.reshape(nr, S, 3))
            image[r0:r1] = col + np.exp(-sdelta.sum(axis=1))[:, None] * bg
    return np.clip(image.reshape(H, W, 3), 0.0, 1.0)
