"""Online integration of a local surfel field into the global map.

Association rasterizes the global map into the incoming view and picks, per
local surfel, the nearest normal-compatible candidate within ``delta_depth``
(camera z). Merges update geometry by confidence-weighted averaging and
features with a GRU (or a weighted sum); unmatched surfels are inserted.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .core import CameraIntrinsics, Pose, SurfelMap
from .ingest import LocalField
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.layers import gru_cell
from .raster import ASSOCIATION_CAP, rasterize


@dataclass(frozen=True)
class FusionConfig:
    delta_depth: float = 0.1
    k_candidates: int = ASSOCIATION_CAP
    normal_angle_max: float = 30.0
    fusion_scheme: str = "gru"

    def __post_init__(self):
        if not self.delta_depth > 0 or self.k_candidates < 1 or not 0 < self.normal_angle_max < 90:
            raise ValueError("invalid fusion config")
        if self.fusion_scheme not in ("gru", "weighted_sum"):
            raise ValueError(f"unknown fusion scheme {self.fusion_scheme!r}")


@dataclass
class AssociationResult:
    merge_local: np.ndarray  # local row, ascending scan order
    merge_global: np.ndarray  # global row
    inserts: np.ndarray  # local rows

    @property
    def merges(self) -> list[tuple[int, int]]:
        return list(zip(self.merge_local.tolist(), self.merge_global.tolist()))


@dataclass
class MergeRound:
    """Merges applied together; each global row appears at most once."""

    local: np.ndarray
    glob: np.ndarray
    w_local: np.ndarray
    w_global: np.ndarray


@dataclass
class FusionPlan:
    """Everything needed to replay the feature side of one integration."""

    n_before: int
    rounds: list[MergeRound]
    inserts: np.ndarray


@dataclass
class FusionReport:
    frame_index: int
    merged: int
    inserted: int
    total_surfels: int
    bytes: int
    ms: float
    degenerate_normals: int = 0
    plan: FusionPlan | None = field(default=None, repr=False)


def associate(global_map: SurfelMap, local: LocalField, intr: CameraIntrinsics, pose: Pose,
              cfg: FusionConfig = FusionConfig()) -> AssociationResult:
    n_local = len(local.surfels)
    all_local = np.arange(n_local)
    if not len(global_map) or not n_local:
        return AssociationResult(np.zeros(0, np.int64), np.zeros(0, np.int64), all_local)
    buf = rasterize(global_map, intr, pose, cfg.k_candidates)
    if not buf.num_hits:
        return AssociationResult(np.zeros(0, np.int64), np.zeros(0, np.int64), all_local)
    idx = buf.padded_index(local.rows * intr.width + local.cols)
    valid = idx >= 0
    safe = np.maximum(idx, 0)
    cand_rows = buf.rows[safe]
    cos_max = np.cos(np.deg2rad(cfg.normal_angle_max))
    ln = local.surfels.normals.astype(np.float64)
    gn = global_map.normals.astype(np.float64)[cand_rows]
    normal_ok = np.einsum("nkc,nc->nk", gn, ln) >= cos_max
    # depths compared along the camera axis of the incoming view
    z_cand = (buf.points[safe] - pose.center) @ pose.rotation[:, 2]
    z_local = (local.surfels.positions.astype(np.float64) - pose.center) @ pose.rotation[:, 2]
    close = np.abs(z_cand - z_local[:, None]) < cfg.delta_depth
    ok = valid & normal_ok & close
    has = ok.any(axis=1)
    first = np.argmax(ok, axis=1)
    merge_local = all_local[has]
    merge_global = cand_rows[merge_local, first[has]]
    return AssociationResult(merge_local, merge_global, all_local[~has])


def merge_geometry(global_surfel, local_surfel):
    """Confidence-weighted average of position/normal/radius; weights add.

    Returns ``(position, normal, radius, weight, degenerate)`` where
    ``degenerate`` flags an averaged normal too short to renormalise (the
    global normal is kept in that case).
    """
    wg, wl = float(global_surfel.weight), float(local_surfel.weight)
    s = wg + wl
    pos = (wl * np.asarray(local_surfel.position, float) + wg * np.asarray(global_surfel.position, float)) / s
    n = (wl * np.asarray(local_surfel.normal, float) + wg * np.asarray(global_surfel.normal, float)) / s
    r = (wl * local_surfel.radius + wg * global_surfel.radius) / s
    norm = np.linalg.norm(n)
    degenerate = norm < 1e-6
    n = np.asarray(global_surfel.normal, float) if degenerate else n / norm
    return pos, n, r, s, bool(degenerate)


def merge_feature(scheme: str, f_local, f_global, weights, P=None):
    """Fuse an incoming feature into a global one.

    ``gru``: the incoming feature is the GRU input and the global feature its
    hidden state. ``weighted_sum``: confidence-weighted average. Accepts
    arrays (one feature or a batch of rows) or Tensors; returns the same kind.
    """
    as_array = not isinstance(f_local, Tensor)
    fl = f_local if not as_array else Tensor(np.atleast_2d(np.asarray(f_local, dtype=np.float64)))
    fg = f_global if not as_array else Tensor(np.atleast_2d(np.asarray(f_global, dtype=np.float64)))
    if fl.shape != fg.shape:
        raise ValueError(f"feature shape mismatch {fl.shape} vs {fg.shape}")
    if scheme == "gru":
        if P["gru.z.w"].shape[1] != fl.shape[-1]:
            raise ValueError(f"feature length {fl.shape[-1]} != GRU width {P['gru.z.w'].shape[1]}")
        if as_array:
            P = {k: Tensor(np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64))
                 for k, v in P.items() if k.startswith("gru.")}
        out = gru_cell(P, fl, fg)
    elif scheme == "weighted_sum":
        wl, wg = (np.atleast_1d(np.asarray(w, dtype=fl.dtype)) for w in weights)
        s = wl + wg
        out = ag.add(ag.mul(fl, Tensor((wl / s)[:, None])), ag.mul(fg, Tensor((wg / s)[:, None])))
    else:
        raise ValueError(f"unknown fusion scheme {scheme!r}")
    if as_array:
        return out.data[0] if np.ndim(f_local) == 1 else out.data
    return out


def replay_features(plan: FusionPlan, global_feats: Tensor, local_feats: Tensor, scheme: str, P) -> Tensor:
    """Apply one integration's feature updates; differentiable in both inputs and ``P``."""
    g = global_feats
    for rnd in plan.rounds:
        fused = merge_feature(scheme, ag.take_rows(local_feats, rnd.local), ag.take_rows(g, rnd.glob),
                              (rnd.w_local, rnd.w_global), P)
        g = ag.index_update(g, rnd.glob, fused)
    if len(plan.inserts):
        g = ag.concat([g, ag.take_rows(local_feats, plan.inserts)], axis=0)
    return g


def _rounds(merge_global: np.ndarray) -> np.ndarray:
    """k for the k-th merge (in scan order) into the same global row."""
    order = np.argsort(merge_global, kind="stable")
    sorted_g = merge_global[order]
    starts = np.flatnonzero(np.r_[True, sorted_g[1:] != sorted_g[:-1]])
    rank_sorted = np.arange(len(sorted_g)) - np.repeat(starts, np.diff(np.r_[starts, len(sorted_g)]))
    rank = np.empty_like(rank_sorted)
    rank[order] = rank_sorted
    return rank


def integrate_geometry(global_map: SurfelMap, local: LocalField, intr: CameraIntrinsics, pose: Pose,
                       cfg: FusionConfig = FusionConfig()):
    """Geometric half of integration. Returns (new map with stale merged features, plan, degenerate count)."""
    assoc = associate(global_map, local, intr, pose, cfg)
    out = global_map.copy()
    L = local.surfels
    rank = _rounds(assoc.merge_global)
    rounds = []
    degenerate = 0
    for k in range(int(rank.max()) + 1 if len(rank) else 0):
        sel = rank == k
        li, gi = assoc.merge_local[sel], assoc.merge_global[sel]
        wl = L.weights[li].astype(np.float64)
        wg = out.weights[gi].astype(np.float64)
        rounds.append(MergeRound(li, gi, wl, wg))
        s = wl + wg
        a, b = (wl / s)[:, None], (wg / s)[:, None]
        pos = a * L.positions[li] + b * out.positions[gi].astype(np.float64)
        nrm = a * L.normals[li] + b * out.normals[gi].astype(np.float64)
        length = np.linalg.norm(nrm, axis=1, keepdims=True)
        bad = length[:, 0] < 1e-6
        degenerate += int(bad.sum())
        nrm = np.where(bad[:, None], out.normals[gi], nrm / np.where(bad[:, None], 1.0, length))
        out.positions[gi] = pos
        out.normals[gi] = nrm
        out.radii[gi] = a[:, 0] * L.radii[li] + b[:, 0] * out.radii[gi]
        out.weights[gi] = s
    plan = FusionPlan(len(global_map), rounds, assoc.inserts)
    if len(assoc.inserts):
        i = assoc.inserts
        out.append(L.positions[i], L.normals[i], L.radii[i], L.weights[i], L.features[i])
    return out, plan, degenerate


def integrate_frame(global_map: SurfelMap, local: LocalField, intr: CameraIntrinsics, pose: Pose,
                    cfg: FusionConfig = FusionConfig(), bundle=None, frame_index: int = 0):
    """Fuse ``local`` into a copy of ``global_map``; returns (map, FusionReport)."""
    t0 = time.perf_counter()
    out, plan, degenerate = integrate_geometry(global_map, local, intr, pose, cfg)
    if plan.rounds:
        P = bundle.tensors() if bundle is not None else None
        with ag.no_grad():
            dtype = bundle.dtype if bundle is not None else out.dtype
            g = replay_features(plan, Tensor(global_map.features.astype(dtype)),
                                Tensor(local.surfels.features.astype(dtype)), cfg.fusion_scheme, P)
        out.features = g.data.astype(out.dtype)
    merged = sum(len(r.local) for r in plan.rounds)
    report = FusionReport(frame_index, merged, len(plan.inserts), len(out), out.nbytes(),
                          1000.0 * (time.perf_counter() - t0), degenerate, plan)
    return out, report


REPORT_FIELDS = ("frame_index", "merged", "inserted", "total_surfels", "bytes", "ms")


def write_reports_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in reports:
            w.writerow([r.frame_index, r.merged, r.inserted, r.total_surfels, r.bytes, f"{r.ms:.3f}"])


def read_reports_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if k == "ms" else int(v)) for k, v in row.items()} for row in rows]
