"""Learnable parameters of every network, their Adam state, and checkpoint IO."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..core import FEATURE_DIM
from .autograd import Tensor
from .layers import FEATURE_CHANNELS, HIDDEN

CKPT_MAGIC = b"SNRF"
CKPT_VERSION = 1

# component -> parameter-name prefix
GROUPS = {
    "extractor": ("extractor.",),
    "projector": ("projector.",),
    "gru": ("gru.",),
    "f_f": ("f_f.",),
    "f_sigma": ("f_sigma.",),
    "f_r": ("f_r.",),
    "refiner": ("refiner.",),
}
RENDER_GROUPS = ("f_f", "f_sigma", "f_r")


class CheckpointError(ValueError):
    pass


def embed_width(dims: int, num_bands: int = 5, include_input: bool = True) -> int:
    return dims * (2 * num_bands + int(include_input))


def _glorot(rng, shape, fan_in, fan_out, dtype):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def layer_shapes(feature_dim=FEATURE_DIM, num_bands=5, include_input=True, with_refiner=False):
    """Ordered (name, shape) list for the full network set."""
    e3 = embed_width(3, num_bands, include_input)
    e1 = embed_width(1, num_bands, include_input)
    c0, c1, c2 = FEATURE_CHANNELS
    shapes = [
        ("extractor.conv0.w", (c0, 3, 3, 3)), ("extractor.conv0.b", (c0,)),
        ("extractor.conv1.w", (c1, c0, 3, 3)), ("extractor.conv1.b", (c1,)),
        ("extractor.conv2.w", (c2, c1, 3, 3)), ("extractor.conv2.b", (c2,)),
        ("projector.w", (c0 + c1 + c2, feature_dim)), ("projector.b", (feature_dim,)),
    ]
    for gate in ("z", "r", "t"):
        shapes += [(f"gru.{gate}.w", (2 * feature_dim, feature_dim)), (f"gru.{gate}.b", (feature_dim,))]
    ff_in = feature_dim + 3 * e3 + e1
    shapes += [("f_f.0.w", (ff_in, HIDDEN)), ("f_f.0.b", (HIDDEN,)),
               ("f_f.1.w", (HIDDEN, HIDDEN)), ("f_f.1.b", (HIDDEN,))]
    shapes += [("f_sigma.0.w", (HIDDEN + e3, 1)), ("f_sigma.0.b", (1,))]
    widths = [HIDDEN + e3, HIDDEN, HIDDEN, HIDDEN, 3]
    for i in range(4):
        shapes += [(f"f_r.{i}.w", (widths[i], widths[i + 1])), (f"f_r.{i}.b", (widths[i + 1],))]
    if with_refiner:
        shapes += [("refiner.enc.w", (8, 5, 3, 3)), ("refiner.enc.b", (8,)),
                   ("refiner.mid.w", (8, 8, 3, 3)), ("refiner.mid.b", (8,)),
                   ("refiner.dec.w", (1, 16, 3, 3)), ("refiner.dec.b", (1,))]
    return shapes


class NetworkBundle:
    """Named parameters plus Adam moments.

    >>> b = NetworkBundle.initialize(seed=0)
    >>> b.params["projector.w"].shape
    (83, 32)
    """

    def __init__(self, params: dict[str, np.ndarray], num_bands: int = 5, include_input: bool = True):
        self.params = dict(params)
        self.num_bands = num_bands
        self.include_input = include_input
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.step = 0

    @classmethod
    def initialize(cls, seed: int = 0, dtype=np.float32, feature_dim: int = FEATURE_DIM,
                   num_bands: int = 5, include_input: bool = True, with_refiner: bool = False):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in layer_shapes(feature_dim, num_bands, include_input, with_refiner):
            if name.endswith(".b"):
                params[name] = np.zeros(shape, dtype=dtype)
            elif len(shape) == 4:
                params[name] = _glorot(rng, shape, shape[1] * 9, shape[0] * 9, dtype)
            else:
                params[name] = _glorot(rng, shape, shape[0], shape[1], dtype)
        return cls(params, num_bands, include_input)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def feature_dim(self) -> int:
        return self.params["projector.w"].shape[1]

    @property
    def has_refiner(self) -> bool:
        return "refiner.enc.w" in self.params

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self.params)
        prefixes = tuple(p for g in groups for p in GROUPS[g])
        return [k for k in self.params if k.startswith(prefixes)]

    def tensors(self, trainable=()) -> dict[str, Tensor]:
        """Leaf tensors over the parameter arrays; names in ``trainable`` track gradients."""
        trainable = set(trainable)
        return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in self.params.items()}

    def astype(self, dtype) -> "NetworkBundle":
        b = NetworkBundle({k: v.astype(dtype) for k, v in self.params.items()}, self.num_bands, self.include_input)
        return b

    def copy(self) -> "NetworkBundle":
        b = NetworkBundle({k: v.copy() for k, v in self.params.items()}, self.num_bands, self.include_input)
        b.m = {k: v.copy() for k, v in self.m.items()}
        b.v = {k: v.copy() for k, v in self.v.items()}
        b.step = self.step
        return b

    def equals(self, other: "NetworkBundle") -> bool:
        return (list(self.params) == list(other.params)
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.params))


def save_checkpoint(bundle: NetworkBundle, path, include_optimizer: bool = False) -> None:
    """Write parameters (and optionally Adam moments) as little-endian f32 tensors."""
    tensors = list(bundle.params.items())
    if include_optimizer:
        tensors += [(f"adam.m/{k}", v) for k, v in bundle.m.items()]
        tensors += [(f"adam.v/{k}", v) for k, v in bundle.v.items()]
        tensors.append(("adam.step", np.array([bundle.step], dtype=np.float32)))
    tensors.append(("meta.embedding", np.array([bundle.num_bands, float(bundle.include_input)], dtype=np.float32)))
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> NetworkBundle:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    meta = tensors.pop("meta.embedding", np.array([5, 1], dtype=np.float32))
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    bundle = NetworkBundle(params, int(meta[0]), bool(meta[1]))
    if "adam.step" in tensors:
        bundle.step = int(tensors["adam.step"][0])
        for k in params:
            bundle.m[k] = tensors[f"adam.m/{k}"]
            bundle.v[k] = tensors[f"adam.v/{k}"]
    return bundle
