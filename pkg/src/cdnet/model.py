"""CD-Net: multi-scale coordinate transform plus a learned Mahalanobis metric.

The transform maps an sRGB image ``(H, W, 3)`` to an ``(H, W, C)``
feature map: parallel bias-free convolutions (1x1 and 11x11 by default) are
concatenated, rectified, then passed through 1x1 convolutions with leaky
ReLU in between and no activation after the last one.  Local CD is
``||L^T (f(x) - f(y))||`` per pixel and the overall CD is its mean.

``L`` is lower triangular and ``M = L L^T`` is used directly as the inverse
covariance of the Mahalanobis form (learning the inverse rather than
inverting a learned covariance; both span the same PSD family).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core as nn
from .classical_cd import CdMap

TRAIN_EPS = 1e-12


@dataclass(frozen=True)
class ArchConfig:
    """Channel plan; the defaults are the published 14,464 + 78 model."""

    in_channels: int = 3
    branch_kernels: tuple = (1, 11)
    branch_channels: tuple = (32, 32)
    head_channels: tuple = (32, 16, 12)
    slope: float = 0.01

    def __post_init__(self):
        if len(self.branch_kernels) != len(self.branch_channels) or not self.branch_kernels:
            raise ValueError("branch_kernels and branch_channels must pair up")
        if not self.head_channels:
            raise ValueError("need at least one head layer")

    @property
    def feature_channels(self) -> int:
        return self.head_channels[-1]

    @classmethod
    def single_branch(cls, kernel: int, **kw) -> "ArchConfig":
        """One front-end filter carrying all the front-end channels."""
        return cls(branch_kernels=(kernel,), branch_channels=(64,), **kw)


@dataclass
class CdNetParams:
    arch: ArchConfig
    branches: list
    head: list
    metric_l: nn.Tensor

    def named(self) -> dict[str, nn.Tensor]:
        out = {}
        for i, layer in enumerate(self.branches):
            out[f"branch{i}.{layer.kernel_size}x{layer.kernel_size}"] = layer.weight
        for i, layer in enumerate(self.head):
            out[f"head{i}"] = layer.weight
        out["metric_l"] = self.metric_l
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named().items()}

    def layer_counts(self) -> list[int]:
        return [layer.n_params for layer in self.branches + self.head]

    @property
    def n_transform_params(self) -> int:
        return sum(self.layer_counts())

    @property
    def n_metric_params(self) -> int:
        return self.metric_l.data.size

    def astype(self, dtype) -> "CdNetParams":
        """Deep copy with every parameter cast to ``dtype``."""
        conv = lambda ls: [nn.ConvLayer(nn.parameter(l.weight.data.astype(dtype), l.weight.name))
                           for l in ls]
        return CdNetParams(self.arch, conv(self.branches), conv(self.head),
                           nn.parameter(self.metric_l.data.astype(dtype), "metric_l"))

    def copy(self) -> "CdNetParams":
        return self.astype(self.metric_l.dtype)

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    @property
    def l_matrix(self) -> np.ndarray:
        return nn.tril_to_matrix(self.metric_l.data, self.arch.feature_channels)


def build(seed: int = 0, arch: ArchConfig | None = None, dtype=np.float32) -> CdNetParams:
    """Fresh parameters: He-uniform convolution weights, ``L`` = identity."""
    arch = arch or ArchConfig()
    rng = np.random.default_rng(seed)

    def conv(cin, cout, k, name):
        bound = math.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
        return nn.ConvLayer(nn.parameter(w, name))

    branches = [conv(arch.in_channels, ch, k, f"branch{i}.{k}x{k}")
                for i, (k, ch) in enumerate(zip(arch.branch_kernels, arch.branch_channels))]
    head = []
    cin = sum(arch.branch_channels)
    for i, cout in enumerate(arch.head_channels):
        head.append(conv(cin, cout, 1, f"head{i}"))
        cin = cout
    c = arch.feature_channels
    l0 = np.eye(c, dtype=dtype)[np.tril_indices(c)]
    params = CdNetParams(arch, branches, head, nn.parameter(l0, "metric_l"))
    if arch == ArchConfig():
        assert params.n_transform_params == 14_464, params.n_transform_params
        assert params.n_metric_params == 78, params.n_metric_params
    return params


def as_input(img, dtype, requires_grad: bool = False) -> nn.Tensor:
    if isinstance(img, nn.Tensor):
        return img
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    return nn.Tensor(np.ascontiguousarray(img, dtype=dtype), requires_grad=requires_grad)


def transform_tensor(x: nn.Tensor, p: CdNetParams) -> nn.Tensor:
    """Feature map ``(H, W, C)`` of an ``(H, W, 3)`` tensor, on the tape."""
    slope = p.arch.slope
    z = nn.concat_channels([layer(x) for layer in p.branches])
    z = nn.leaky_relu(z, slope)
    for i, layer in enumerate(p.head):
        z = layer(z)
        if i < len(p.head) - 1:
            z = nn.leaky_relu(z, slope)
    return z


def transform(img, p: CdNetParams) -> np.ndarray:
    """Features of an ``(H, W, 3)`` sRGB image as an ``(H, W, C)`` array."""
    return transform_tensor(as_input(img, p.metric_l.dtype), p).data


def local_cd(fa, fb, p: CdNetParams) -> CdMap:
    """Per-pixel Mahalanobis distance between two ``(H, W, C)`` feature maps."""
    fa = np.asarray(fa)
    fb = np.asarray(fb)
    if fa.shape != fb.shape:
        raise ValueError(f"feature shapes differ: {fa.shape} vs {fb.shape}")
    h, w, c = fa.shape
    if c != p.arch.feature_channels:
        raise ValueError(f"features have {c} channels, model expects {p.arch.feature_channels}")
    d = (fa - fb).reshape(h * w, c)
    z = d @ p.l_matrix.astype(d.dtype)
    return CdMap.from_values(np.sqrt(np.einsum("ij,ij->i", z, z)).reshape(h, w))


def overall_cd_tensor(a: nn.Tensor, b: nn.Tensor, p: CdNetParams,
                      eps: float = 0.0) -> tuple[nn.Tensor, nn.Tensor]:
    """(mean CD, CD map) on the tape, for training and input gradients."""
    return features_cd_tensor(transform_tensor(a, p), transform_tensor(b, p), p, eps)


def features_cd_tensor(fa: nn.Tensor, fb: nn.Tensor, p: CdNetParams,
                       eps: float = 0.0) -> tuple[nn.Tensor, nn.Tensor]:
    """(mean CD, CD map) from two feature tensors already on the tape."""
    cd_map = nn.mahalanobis_map(fa - fb, p.metric_l, eps=eps)
    return nn.mean(cd_map), cd_map


def overall_cd(a, b, p: CdNetParams) -> tuple[float, CdMap]:
    """Overall CD of two sRGB images; exactly symmetric in ``a`` and ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    fa = transform(a, p)
    fb = transform(b, p)
    # |L^T d| is invariant to d -> -d only up to rounding; ordering the
    # operands makes the swap case bit-exact.
    if _order_key(a) > _order_key(b):
        fa, fb = fb, fa
    m = local_cd(fa, fb, p)
    return m.mean, m


def _order_key(img: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(img).tobytes(), digest_size=16).digest()


class CdNetMetric:
    """Callable ``metric(a, b) -> float`` with a bounded feature cache.

    Useful for probes that compare the same images many times.
    """

    def __init__(self, params: CdNetParams, cache_size: int = 512):
        self.params = params
        self.cache_size = cache_size
        self._cache: dict[bytes, np.ndarray] = {}

    def features(self, img) -> np.ndarray:
        img = np.asarray(img)
        key = _order_key(img) + str(img.shape).encode()
        f = self._cache.get(key)
        if f is None:
            f = transform(img, self.params)
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = f
        return f

    def __call__(self, a, b) -> float:
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        fa, fb = self.features(a), self.features(b)
        if _order_key(a) > _order_key(b):
            fa, fb = fb, fa
        return local_cd(fa, fb, self.params).mean

    def with_grad(self, x, y) -> tuple[float, np.ndarray]:
        """CD and its gradient with respect to the pixels of ``y``."""
        dtype = self.params.metric_l.dtype
        tx = as_input(x, dtype)
        ty = as_input(y, dtype, requires_grad=True)
        value, _ = overall_cd_tensor(tx, ty, self.params)
        nn.backward(value)
        self.params.zero_grad()
        return float(value.data), ty.grad


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"CDNETCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: CdNetParams
    metadata: dict = field(default_factory=dict)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path, ckpt: Checkpoint) -> None:
    """Write a checkpoint atomically.

    Layout: ``CDNETCKPT <version>\\n``, a header-length line, a JSON header
    (arch, parameter names/dims in order, metadata), then the parameters as
    little-endian float32 in header order.
    """
    arrays = ckpt.params.arrays()
    header = {
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "arch": asdict(ckpt.params.arch),
        "params": [{"name": k, "dims": list(v.shape)} for k, v in arrays.items()],
        "metadata": ckpt.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
            fh.write(b"%d\n" % len(hbytes))
            fh.write(hbytes)
            for v in arrays.values():
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, arch: ArchConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``arch`` (if given) must match the stored one."""
    raw = Path(path).read_bytes()
    try:
        first, rest = raw.split(b"\n", 1)
        magic, version = first.split(b" ")
        hlen_line, rest = rest.split(b"\n", 1)
        hlen = int(hlen_line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: not a CD-Net checkpoint") from exc
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if int(version) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {int(version)} is not "
                              f"supported (expected {CHECKPOINT_VERSION})")
    if len(rest) < hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(rest[:hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = rest[hlen:]

    stored = header["arch"]
    stored_arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                                for k, v in stored.items()})
    if arch is not None and arch != stored_arch:
        raise CheckpointError(f"{path}: dimension mismatch, checkpoint has {stored_arch}, "
                              f"model expects {arch}")
    params = build(0, stored_arch)
    named = params.named()
    expected = sum(math.prod(e["dims"]) for e in header["params"]) * 4
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {expected}"
                              " (truncated or corrupt file)")
    offset = 0
    for entry in header["params"]:
        name, dims = entry["name"], tuple(entry["dims"])
        if name not in named or named[name].shape != dims:
            have = named[name].shape if name in named else None
            raise CheckpointError(f"{path}: dimension mismatch for {name}: {dims} vs {have}")
        n = math.prod(dims) * 4
        named[name].data[...] = np.frombuffer(payload, "<f4", count=n // 4,
                                              offset=offset).reshape(dims)
        offset += n
    return Checkpoint(params, header.get("metadata", {}))
