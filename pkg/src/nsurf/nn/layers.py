"""Network building blocks expressed over a name -> Tensor parameter mapping."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor

FEATURE_CHANNELS = (32, 27, 24)  # pyramid channels, 83 after concat
HIDDEN = 256


def dense(P, prefix: str, x: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, P[prefix + ".w"]), P[prefix + ".b"])


def mlp(P, prefix: str, x: Tensor, n_layers: int) -> Tensor:
    """ReLU between layers, linear output."""
    for i in range(n_layers):
        x = dense(P, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = ag.relu(x)
    return x


def gru_cell(P, x: Tensor, h: Tensor, prefix: str = "gru") -> Tensor:
    """One GRU update with ``x`` the incoming feature and ``h`` the hidden state.

    z = sigmoid(Mz[x, h]); r = sigmoid(Mr[x, h]);
    h~ = tanh(Mt[r*h, x]); h' = (1 - z)*h + z*h~.
    """
    xh = ag.concat([x, h], axis=-1)
    z = ag.sigmoid(dense(P, prefix + ".z", xh))
    r = ag.sigmoid(dense(P, prefix + ".r", xh))
    cand = ag.tanh(dense(P, prefix + ".t", ag.concat([ag.mul(r, h), x], axis=-1)))
    return ag.add(h, ag.mul(z, ag.sub(cand, h)))


def feature_pyramid(P, rgb: Tensor, prefix: str = "extractor") -> Tensor:
    """(3, H, W) image -> (83, H, W) multi-scale feature map."""
    _, H, W = rgb.shape
    c0 = ag.relu(ag.conv2d_3x3(rgb, P[prefix + ".conv0.w"], P[prefix + ".conv0.b"]))
    c1 = ag.relu(ag.conv2d_3x3(ag.avgpool2(c0), P[prefix + ".conv1.w"], P[prefix + ".conv1.b"]))
    c2 = ag.relu(ag.conv2d_3x3(ag.avgpool2(c1), P[prefix + ".conv2.w"], P[prefix + ".conv2.b"]))
    return ag.concat([c0, ag.upsample_nearest(c1, 2, (H, W)), ag.upsample_nearest(c2, 4, (H, W))], axis=0)


def pixel_features(P, rgb: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Surfel features in (-1, 1) for the pixels (rows, cols) of an (H, W, 3) image."""
    dtype = P["projector.w"].dtype
    img = Tensor(np.ascontiguousarray(np.asarray(rgb, dtype=dtype).transpose(2, 0, 1)))
    fmap = feature_pyramid(P, img)
    C, H, W = fmap.shape
    flat = ag.reshape(fmap, (C, H * W))
    picked = ag.take_rows(ag.transpose(flat, (1, 0)), rows * W + cols)
    return ag.tanh(dense(P, "projector", picked))


def learned_depth_residual(P, filled: np.ndarray, mask: np.ndarray, rgb: np.ndarray, prefix="refiner") -> Tensor:
    """Tiny encoder-decoder; returns a multiplicative log-depth correction in (-0.1, 0.1)."""
    dtype = P[prefix + ".enc.w"].dtype
    H, W = filled.shape
    x = np.concatenate([filled[None], mask[None].astype(dtype), np.asarray(rgb).transpose(2, 0, 1)], axis=0)
    x = Tensor(x.astype(dtype))
    e = ag.relu(ag.conv2d_3x3(x, P[prefix + ".enc.w"], P[prefix + ".enc.b"]))
    m = ag.relu(ag.conv2d_3x3(ag.avgpool2(e), P[prefix + ".mid.w"], P[prefix + ".mid.b"]))
    d = ag.conv2d_3x3(ag.concat([e, ag.upsample_nearest(m, 2, (H, W))], axis=0), P[prefix + ".dec.w"], P[prefix + ".dec.b"])
    return ag.mul(ag.tanh(ag.reshape(d, (H, W))), 0.1)
