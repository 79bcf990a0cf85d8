"""Small reverse-mode autodiff over the handful of ops CD-Net needs.

Image tensors are numpy arrays in channel-last ``(H, W, C)`` layout, which
keeps the convolution matmuls in the fast BLAS orientation.  Every op
builds a node holding a closure that pushes its output gradient back to its
inputs; :func:`backward` walks the graph in reverse topological order.

Convolution is cross-correlation (no kernel flip) with replicate padding
so the output has the input's spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__


def parameter(data, name: str) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=parents if needs else (),
                  _backward=backward_fn if needs else None)


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward() needs a Tensor produced by a forward pass")
    if loss._backward is None:
        raise RuntimeError("no recorded forward pass: the tensor does not depend "
                           "on any parameter requiring grad")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data) if grad is None
             else np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- elementwise and reductions ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def absolute(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def back(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _node(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype), (x,), back)


def total(x: Tensor) -> Tensor:
    return _node(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype), (x,),
                 lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-D tensor."""
    parts = [_as_tensor(p) for p in parts]
    data = np.stack([p.data for p in parts])
    return _node(data, parts, lambda g: tuple(g[i] for i in range(len(parts))))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    out = x.data * x.dtype.type(slope)
    np.maximum(x.data, out, out=out)
    pos = x.data > 0

    def back(g):
        # boolean-mask np.where is slow on large arrays; build the factor arithmetically
        factor = pos.astype(g.dtype)
        factor *= 1.0 - slope
        factor += slope
        factor *= g
        return (factor,)

    return _node(out, (x,), back)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("nothing to concatenate")
    spatial = {p.shape[:-1] for p in parts}
    if len(spatial) != 1:
        raise ValueError(f"spatial dims differ: {sorted(spatial)}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])
    data = np.concatenate([p.data for p in parts], axis=-1)

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(data, parts, back)


# --- convolution ------------------------------------------------------------

@dataclass
class ConvLayer:
    """Bias-free convolution weights of shape ``(out, in, k, k)``."""

    weight: Tensor

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
            raise ValueError(f"weights must be (out, in, k, k) with odd k, got {w.shape}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.weight.data.size

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_same(x, self.weight)


def _patches(x: np.ndarray, k: int) -> np.ndarray:
    """Strided ``(H, W, k, k*C)`` view of replicate-padded windows, no copy."""
    h, w, c = x.shape
    r = k // 2
    xp = np.pad(x, ((r, r), (r, r), (0, 0)), mode="edge")
    # windows along each padded row first: (H+2r, W, k*C), contiguous inner runs
    rows = sliding_window_view(xp.reshape(h + 2 * r, -1), k * c, axis=1)[:, ::c, :]
    return sliding_window_view(rows, k, axis=0).transpose(0, 1, 3, 2)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``(H, W, C)`` -> ``(H*W, k*k*C)`` patches ordered (row, col, channel)."""
    h, w, c = x.shape
    return _patches(x, k).reshape(h * w, k * k * c)


# rows of patches materialized at a time; ~1k pixels keeps a block in cache
_BLOCK_PIXELS = 1024


def _row_blocks(h: int, w: int):
    step = max(1, _BLOCK_PIXELS // w)
    return [slice(s, min(s + step, h)) for s in range(0, h, step)]


def _col2im(dcol: np.ndarray, shape, k: int) -> np.ndarray:
    h, w, c = shape
    r = k // 2
    dcol = dcol.reshape(h, w, k, k, c)
    dxp = np.zeros((h + 2 * r, w + 2 * r, c), dtype=dcol.dtype)
    for i in range(k):
        for j in range(k):
            dxp[i:i + h, j:j + w] += dcol[:, :, i, j]
    if r:
        # fold replicated border rows/columns back onto the edge pixels
        dxp[r] += dxp[:r].sum(axis=0)
        dxp[r + h - 1] += dxp[r + h:].sum(axis=0)
        dxp = dxp[r:r + h]
        dxp[:, r] += dxp[:, :r].sum(axis=1)
        dxp[:, r + w - 1] += dxp[:, r + w:].sum(axis=1)
        dxp = dxp[:, r:r + w]
    return np.ascontiguousarray(dxp)


def conv2d_same(x: Tensor, weight: Tensor) -> Tensor:
    """Stride-1 cross-correlation, replicate padding, output size = input size.

    ``x`` is ``(H, W, C)``; ``weight`` is ``(out, C, k, k)`` and
    ``out[p, q, o] = sum_{i,j,c} weight[o, c, i, j] * x[p + i - r, q + j - r, c]``
    with ``r = k // 2`` and indices clamped to the image.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 3:
        raise ValueError(f"expected an (H, W, C) tensor, got {x.shape}")
    o, ci, k, _ = weight.shape
    h, w, c = x.shape
    if c != ci:
        raise ValueError(f"channel mismatch: input has {c}, layer expects {ci}")
    # (out, C, k, k) -> (k*k*C, out) to match the patch ordering
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * ci, o)
    kk = k * k * ci
    if k == 1:
        out = (x.data.reshape(h * w, c) @ wmat).reshape(h, w, o)
    else:
        # im2col one block of rows at a time; the full patch matrix is never
        # stored and the backward pass rebuilds blocks on demand
        patches = _patches(x.data, k)
        out = np.empty((h, w, o), dtype=np.result_type(x.data, wmat))
        for rs in _row_blocks(h, w):
            np.matmul(patches[rs].reshape(-1, kk), wmat, out=out[rs].reshape(-1, o))

    def back(g):
        g2 = g.reshape(h * w, o)
        gw = None
        if weight.requires_grad:
            if k == 1:
                gw = g2.T @ x.data.reshape(h * w, c)
            else:
                gw = np.zeros((o, kk), dtype=np.result_type(g, patches))
                for rs in _row_blocks(h, w):
                    gw += g[rs].reshape(-1, o).T @ patches[rs].reshape(-1, kk)
            gw = gw.reshape(o, k, k, ci).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcol = g2 @ wmat.T
            gx = dcol.reshape(h, w, c) if k == 1 else _col2im(dcol, (h, w, c), k)
        return gx, gw

    return _node(out, (x, weight), back)


# --- Mahalanobis distance ----------------------------------------------------

def tril_to_matrix(v: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((n, n), dtype=v.dtype)
    m[np.tril_indices(n)] = v
    return m


def n_tril(n: int) -> int:
    return n * (n + 1) // 2


def mahalanobis_map(d: Tensor, l_tril: Tensor, eps: float = 0.0) -> Tensor:
    """Per-pixel ``sqrt(||L^T d||^2 + eps)`` for an ``(H, W, C)`` difference.

    ``l_tril`` holds the ``C(C+1)/2`` lower-triangle entries of ``L`` in
    row-major order.  Where the value is exactly zero the gradient is taken
    as zero.
    """
    d, l_tril = _as_tensor(d), _as_tensor(l_tril)
    h, w, c = d.shape
    if l_tril.data.size != n_tril(c):
        raise ValueError(f"metric factor has {l_tril.data.size} entries, "
                         f"expected {n_tril(c)} for {c} channels")
    lmat = tril_to_matrix(l_tril.data, c)
    dm = d.data.reshape(h * w, c)
    z = dm @ lmat
    val = np.sqrt(np.einsum("ij,ij->i", z, z) + eps)

    def back(g):
        g = g.reshape(h * w)
        safe = np.where(val > 0, val, 1.0)
        dq = np.where(val > 0, g / (2.0 * safe), 0.0).astype(z.dtype)
        dz = 2.0 * z * dq[:, None]
        gd = (dz @ lmat.T).reshape(h, w, c) if d.requires_grad else None
        gl = (dm.T @ dz)[np.tril_indices(c)] if l_tril.requires_grad else None
        return gd, gl

    return _node(val.reshape(h, w), (d, l_tril), back)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the arrays in ``params``.

    ``params`` and ``grads`` map names to arrays; a missing gradient counts
    as zero.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if g is not None and g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)).astype(p.dtype)
