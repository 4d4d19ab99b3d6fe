"""Keyframe selection, the online reconstruction loop, training and per-scene fine-tuning.

Surfel geometry never receives gradients, so for training the geometric side
of every keyframe integration is computed once per scene and cached as a
:class:`~nsurf.fusion.FusionPlan`. Each step then only replays the feature
path (extraction, GRU merges, rendering), tracking gradients through the last
``unroll_window`` integrations.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import SurfelMap
from .fusion import FusionConfig, integrate_frame, integrate_geometry, replay_features
from .ingest import DepthRefiner, Frame, build_local_surfels, local_geometry, refine_depth, refine_depth_tensor
from .nn import autograd as ag
from .nn.autograd import Tensor
from .nn.bundle import RENDER_GROUPS, NetworkBundle
from .nn.layers import pixel_features
from .nn.optim import adam_step
from .raster import rasterize
from .render import PositionalEmbedding, RenderConfig, render_buffer, render_image

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    finetune_lr: float = 2e-4
    lambda_depth: float = 0.1
    keyframe_fraction: float = 0.05
    unroll_window: int = 2
    iterations: int = 2000
    seed: int = 0
    stride: int = 2
    heldout_every: int = 8
    batch_pixels: int | None = 512  # rays sampled per step; None renders the whole view
    fusion: FusionConfig = field(default_factory=FusionConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    refiner: DepthRefiner = field(default_factory=DepthRefiner)

    def __post_init__(self):
        if not 0 < self.keyframe_fraction <= 1:
            raise ValueError("keyframe_fraction must be in (0, 1]")
        if self.unroll_window < 1:
            raise ValueError("unroll_window must be >= 1")
        if self.batch_pixels is not None and self.batch_pixels < 1:
            raise ValueError("batch_pixels must be positive")


def select_keyframes(n: int, fraction: float) -> list[int]:
    """ceil(n * fraction) evenly spaced indices starting at 0."""
    if n < 1:
        raise ValueError("sequence must contain at least one frame")
    k = min(n, math.ceil(n * fraction))
    return [(i * n) // k for i in range(k)]


def split_views(n: int, cfg: TrainConfig):
    """(keyframes, supervision, held-out) frame indices for a sequence of length n.

    Every ``heldout_every``-th frame (offset so frame 0 stays a candidate
    keyframe) is held out; keyframes come from the rest; the remainder
    supervises rendering.
    """
    heldout = [i for i in range(n) if cfg.heldout_every and i % cfg.heldout_every == cfg.heldout_every // 2]
    pool = [i for i in range(n) if i not in set(heldout)]
    keyframes = [pool[j] for j in select_keyframes(len(pool), cfg.keyframe_fraction)]
    kf = set(keyframes)
    return keyframes, [i for i in pool if i not in kf], heldout


def reconstruct_online(frames, bundle: NetworkBundle, cfg: TrainConfig = TrainConfig(),
                       keyframes=None, on_keyframe=None):
    """Integrate keyframes of a frame stream into a global map.

    ``frames`` may be any iterable; keyframes are chosen uniformly when its
    length is known, else every ``round(1 / keyframe_fraction)``-th frame.
    ``on_keyframe(map, report)`` runs after each integration.
    """
    if keyframes is None:
        if hasattr(frames, "__len__"):
            keyframes = select_keyframes(len(frames), cfg.keyframe_fraction)
        else:
            every = max(1, round(1 / cfg.keyframe_fraction))
            keyframes = None
    kf = set(keyframes) if keyframes is not None else None
    smap = SurfelMap(bundle.feature_dim, bundle.dtype)
    reports = []
    for i, frame in enumerate(frames):
        if (i not in kf) if kf is not None else (i % every):
            continue
        local = build_local_surfels(frame, cfg.refiner, bundle, cfg.stride)
        smap, report = integrate_frame(smap, local, frame.intrinsics, frame.pose, cfg.fusion, bundle, frame.index)
        reports.append(report)
        if on_keyframe is not None:
            on_keyframe(smap, report)
    return smap, reports


class SceneCache:
    """Cached geometry of one training scene: keyframe fields, fusion plans, view rasters."""

    def __init__(self, frames: list[Frame], cfg: TrainConfig, bundle: NetworkBundle | None = None,
                 keyframes=None, supervision=None, heldout=None):
        self.frames = frames
        self.cfg = cfg
        kf, sup, ho = split_views(len(frames), cfg)
        self.keyframes = list(keyframes if keyframes is not None else kf)
        self.supervision = list(supervision if supervision is not None else sup)
        self.heldout = list(heldout if heldout is not None else ho)
        if set(self.keyframes) & set(self.supervision):
            raise ValueError("supervision frames must be disjoint from keyframes")
        self._buffers = {}
        self.rebuild(bundle)

    def rebuild(self, bundle=None) -> None:
        cfg = self.cfg
        dtype = bundle.dtype if bundle is not None else np.float32
        fdim = bundle.feature_dim if bundle is not None else 32
        smap = SurfelMap(fdim, dtype)
        self.locals, self.plans = [], []
        for k in self.keyframes:
            f = self.frames[k]
            local = local_geometry(f, cfg.refiner, cfg.stride, bundle, dtype=dtype)
            smap, plan, _ = integrate_geometry(smap, local, f.intrinsics, f.pose, cfg.fusion)
            self.locals.append(local)
            self.plans.append(plan)
        self.map = smap
        self._buffers.clear()

    def buffer(self, view: int):
        if view not in self._buffers:
            f = self.frames[view]
            self._buffers[view] = rasterize(self.map, f.intrinsics, f.pose, self.cfg.render.max_hits)
        return self._buffers[view]

    def features(self, P, scheme: str, unroll_window: int) -> Tensor:
        """Global surfel features after all keyframes; gradients flow through the last window."""
        dtype = P["projector.w"].dtype
        g = Tensor(np.zeros((0, self.map.feature_dim), dtype=dtype))
        n = len(self.keyframes)
        for j, (k, local, plan) in enumerate(zip(self.keyframes, self.locals, self.plans)):
            ctx = contextlib.nullcontext() if j >= n - unroll_window else ag.no_grad()
            with ctx:
                lf = pixel_features(P, self.frames[k].rgb, local.rows, local.cols)
                g = replay_features(plan, g, lf, scheme, P)
        return g


def _sample_pixels(rng, n: int, batch: int | None):
    if batch is None or batch >= n:
        return None
    return np.sort(rng.choice(n, batch, replace=False))


def _render_loss(P, feats, smap, buffer, frame, cfg: RenderConfig, emb, pixels=None):
    pred = render_buffer(P, feats, smap, buffer, frame.pose.center, emb, cfg, pixels)
    gt = frame.rgb.reshape(-1, 3)
    if pixels is not None:
        gt = gt[pixels]
    diff = ag.sub(pred, Tensor(gt.astype(pred.dtype)))
    # per-pixel squared L2 error, averaged over pixels
    return ag.mul(ag.tsum(ag.mul(diff, diff)), 1.0 / len(gt))


def _depth_loss(scene: SceneCache, P, window: int):
    """Masked L1 between refined and sensor depth over the last ``window`` keyframes."""
    terms = []
    for k in scene.keyframes[-window:]:
        f = scene.frames[k]
        mask = f.valid_mask
        if not mask.any():
            continue
        if scene.cfg.refiner.variant == "learned":
            d = refine_depth_tensor(scene.cfg.refiner, f, P)
        else:
            d = Tensor(refine_depth(scene.cfg.refiner, f))
        diff = ag.sub(d, Tensor(f.sensor_depth.astype(d.dtype)))
        terms.append(ag.mul(ag.tsum(ag.tabs(ag.mul(diff, Tensor(mask.astype(d.dtype))))), 1.0 / mask.sum()))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.mul(total, 1.0 / len(terms))


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def train_step(scene: SceneCache, bundle: NetworkBundle, cfg: TrainConfig, rng: np.random.Generator,
               view: int | None = None, update: bool = True) -> dict:
    """One optimisation step on a sampled supervision view; returns the three losses."""
    if cfg.refiner.variant == "learned":
        with ag.no_grad():
            scene.rebuild(bundle)
    trainable = bundle.names()
    if cfg.fusion.fusion_scheme != "gru":
        trainable = [k for k in trainable if not k.startswith("gru.")]
    P = bundle.tensors(trainable)
    emb = PositionalEmbedding(bundle.num_bands, bundle.include_input)
    if view is None:
        view = int(rng.choice(scene.supervision))
    feats = scene.features(P, cfg.fusion.fusion_scheme, cfg.unroll_window)
    buf = scene.buffer(view)
    pixels = _sample_pixels(rng, buf.num_pixels, cfg.batch_pixels)
    l_render = _render_loss(P, feats, scene.map, buf, scene.frames[view], cfg.render, emb, pixels)
    l_d = _depth_loss(scene, P, cfg.unroll_window)
    total = l_render if l_d is None else ag.add(l_render, ag.mul(l_d, cfg.lambda_depth))
    _check_finite(float(total.data), "training loss")
    if update:
        total.backward()
        grads = {k: P[k].grad for k in trainable if P[k].grad is not None}
        bundle.step = adam_step(bundle.params, grads, bundle.m, bundle.v, bundle.step, cfg.lr)
    return {"view": view, "L_render": float(l_render.data), "L_d": float(l_d.data) if l_d is not None else 0.0,
            "L": float(total.data)}


def train(scenes: list[SceneCache], bundle: NetworkBundle, cfg: TrainConfig, iterations: int | None = None,
          log_path=None, callback=None) -> list[dict]:
    """Adam training over one or more cached scenes; optionally writes a CSV log."""
    rng = np.random.default_rng(cfg.seed)
    iterations = cfg.iterations if iterations is None else iterations
    history = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(["step", "L_render", "L_d", "L", "wall_ms"])
    try:
        for step in range(iterations):
            t0 = time.perf_counter()
            scene = scenes[int(rng.integers(len(scenes)))] if len(scenes) > 1 else scenes[0]
            out = train_step(scene, bundle, cfg, rng)
            out["step"] = step
            out["wall_ms"] = 1000.0 * (time.perf_counter() - t0)
            history.append(out)
            if writer:
                writer.writerow([step, f"{out['L_render']:.9g}", f"{out['L_d']:.9g}", f"{out['L']:.9g}",
                                 f"{out['wall_ms']:.3f}"])
            if callback is not None:
                callback(out)
            if step % 100 == 0:
                log.info("step %d L_render %.5f", step, out["L_render"])
    finally:
        if fh:
            fh.close()
    return history


def finetune_scene(smap: SurfelMap, bundle: NetworkBundle, views: list[Frame], cfg: TrainConfig,
                   iterations: int | None = None, buffers=None):
    """Optimise stored surfel features and the rendering networks on held-in views.

    Geometry, surfel count, extractor, GRU and depth refiner are untouched.
    Returns a new (map, bundle) pair.
    """
    iterations = cfg.iterations if iterations is None else iterations
    smap = smap.copy()
    bundle = bundle.copy()
    if iterations <= 0 or not views or not len(smap):
        return smap, bundle
    rng = np.random.default_rng(cfg.seed)
    emb = PositionalEmbedding(bundle.num_bands, bundle.include_input)
    names = bundle.names(RENDER_GROUPS)
    params = {k: bundle.params[k] for k in names}
    params["surfel.features"] = smap.features.astype(bundle.dtype)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    if buffers is None:
        buffers = [rasterize(smap, f.intrinsics, f.pose, cfg.render.max_hits) for f in views]
    for _ in range(iterations):
        i = int(rng.integers(len(views)))
        P = bundle.tensors(names)
        feats = Tensor(params["surfel.features"], requires_grad=True)
        pixels = _sample_pixels(rng, buffers[i].num_pixels, cfg.batch_pixels)
        loss = _render_loss(P, feats, smap, buffers[i], views[i], cfg.render, emb, pixels)
        _check_finite(float(loss.data), "fine-tuning loss")
        loss.backward()
        grads = {k: P[k].grad for k in names if P[k].grad is not None}
        grads["surfel.features"] = feats.grad
        step = adam_step(params, grads, m, v, step, cfg.finetune_lr)
    smap.features = params["surfel.features"].astype(smap.dtype)
    return smap, bundle


def evaluate_views(smap: SurfelMap, bundle: NetworkBundle, frames: list[Frame], cfg: RenderConfig = RenderConfig()):
    """Per-view (index, psnr, ssim, rendered image)."""
    from .io.metrics import psnr, ssim

    out = []
    for f in frames:
        img = render_image(smap, f.intrinsics, f.pose, bundle, cfg=cfg)
        out.append((f.index, psnr(img, f.rgb), ssim(img, f.rgb), img))
    return out


def feedforward_map(scene: SceneCache, bundle: NetworkBundle) -> SurfelMap:
    """The scene map with features computed by the current networks (no gradients)."""
    with ag.no_grad():
        feats = scene.features(bundle.tensors(), scene.cfg.fusion.fusion_scheme, 1)
    smap = scene.map.copy()
    smap.features = feats.data.astype(smap.dtype)
    return smap
