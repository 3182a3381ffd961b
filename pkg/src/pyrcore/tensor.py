"""Minimal dense-tensor engine with reverse-mode autodiff.

Exactly the kernels the pyramid cores need: conv2d, group normalization,
ReLU, bilinear resize and elementwise add, plus a full-sum reduction so a
scalar loss can seed backpropagation. Data lives in numpy arrays (float32
for speed paths, float64 for verification paths); the backward pass is a
tape of closures built during the forward pass.

Reduction order is fixed: convolutions are evaluated as one GEMM per
kernel offset in row-major offset order, bilinear resize as two dense
matrix contractions (width then height). With a fixed BLAS thread count
results are bit-reproducible run to run.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class no_grad:
    """Context manager disabling graph construction (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus optional gradient and backward closure.

    Feature maps are rank-4 (batch, channels, rows, cols); affine/norm
    parameters are rank-1; loss values are rank-0. ``grad`` is allocated
    lazily on first accumulation and always matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 parents: tuple = (), backward: Optional[Callable] = None, op: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this tensor through its tape.

        Without an explicit seed the tensor must be a scalar (the loss).
        """
        if seed is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.accumulate_grad(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter:
    """Named, optionally frozen leaf tensor.

    Frozen parameters still receive gradients; optimizers must skip them.
    """

    def __init__(self, tensor: Tensor, name: str, frozen: bool = False):
        tensor.requires_grad = True
        self.tensor = tensor
        self.name = name
        self.frozen = frozen

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.zero_grad()

    def __repr__(self):
        tag = " frozen" if self.frozen else ""
        return f"Parameter({self.name}, shape={self.tensor.shape}{tag})"


def _result(data, parents, backward, op) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward, op=op)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if x.shape != y.shape:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out_data = x.data + y.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if y.requires_grad:
            y.accumulate_grad(g)

    return _result(out_data, (x, y), backward, "add")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    mask = x.data > 0
    out_data = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, g, g.dtype.type(0)))

    return _result(out_data, (x,), backward, "relu")


def sum_all(x: Tensor) -> Tensor:
    """Reduce a tensor to a rank-0 scalar by summation."""
    out_data = x.data.sum()

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g))

    return _result(out_data, (x,), backward, "sum")


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    """Output extent of a convolution along one spatial dimension."""
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over an NCHW tensor.

    ``weight`` is (out_c, in_c, k, k); output spatial size follows the
    floor((h + 2p - k)/s) + 1 rule. Evaluated as one GEMM per kernel
    offset so the reduction order is fixed.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and weight")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError("conv2d supports square kernels only")
    if c != ic:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ic}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    k, s, p = kh, stride, padding
    oh = conv_out_size(h, k, s, p)
    ow = conv_out_size(w, k, s, p)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output size {oh}x{ow} "
                         f"for input {h}x{w}, k={k}, s={s}, p={p}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({oc},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    acc = np.zeros((oc, n, oh, ow), dtype=x.data.dtype)
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s]
            acc += np.tensordot(weight.data[:, :, ki, kj], patch, axes=([1], [1]))
    out_data = np.ascontiguousarray(np.moveaxis(acc, 0, 1))
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if not (need_x or need_w):
            return
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(weight.data) if need_w else None
        for ki in range(k):
            for kj in range(k):
                if need_w:
                    patch = xp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s]
                    gw[:, :, ki, kj] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    gpatch = np.tensordot(weight.data[:, :, ki, kj], g, axes=([0], [1]))
                    gxp[:, :, ki:ki + s * oh:s, kj:kj + s * ow:s] += np.moveaxis(gpatch, 0, 1)
        if need_w:
            weight.accumulate_grad(gw)
        if need_x:
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            x.accumulate_grad(np.ascontiguousarray(gx))

    return _result(out_data, parents, backward, "conv2d")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize per (sample, channel group) to zero mean / unit variance,
    then apply the per-channel affine gamma/beta."""
    if x.ndim != 4:
        raise ShapeError("group_norm expects a rank-4 input")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm: gamma/beta must have shape (channels,)")
    cg = c // groups

    xr = x.data.reshape(n, groups, cg, h, w)
    mu = xr.mean(axis=(2, 3, 4), keepdims=True)
    var = xr.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (xr - mu) * inv_std
    gam = gamma.data.reshape(1, groups, cg, 1, 1)
    bet = beta.data.reshape(1, groups, cg, 1, 1)
    out_data = (xhat * gam + bet).reshape(n, c, h, w)

    def backward(g):
        gr = g.reshape(n, groups, cg, h, w)
        if gamma.requires_grad:
            gamma.accumulate_grad((gr * xhat).sum(axis=(0, 3, 4)).reshape(c))
        if beta.requires_grad:
            beta.accumulate_grad(gr.sum(axis=(0, 3, 4)).reshape(c))
        if x.requires_grad:
            gy_gam = gr * gam
            m1 = gy_gam.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (gy_gam * xhat).mean(axis=(2, 3, 4), keepdims=True)
            gx = inv_std * (gy_gam - m1 - xhat * m2)
            x.accumulate_grad(gx.reshape(n, c, h, w))

    return _result(out_data, (x, gamma, beta), backward, "group_norm")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Dense 1-D bilinear sampling matrix with half-pixel centers.

    Row i holds the two source weights for output pixel i; source
    coordinates are clamped to the borders, so every row sums to 1.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = dtype(src - i0)
        m[i, i0] += dtype(1) - t
        m[i, i1] += t
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize an NCHW tensor with half-pixel-center bilinear sampling."""
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects a rank-4 input")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: non-positive target size {out_h}x{out_w}")
    n, c, h, w = x.shape
    if out_h == h and out_w == w:
        out_data = x.data.copy()

        def backward_id(g):
            if x.requires_grad:
                x.accumulate_grad(g)

        return _result(out_data, (x,), backward_id, "bilinear_resize")

    dt = x.data.dtype.type
    rh = _interp_matrix(h, out_h, dt)
    cw = _interp_matrix(w, out_w, dt)
    tmp = np.tensordot(x.data, cw, axes=([3], [1]))           # (n, c, h, out_w)
    out_data = np.tensordot(tmp, rh, axes=([2], [1]))         # (n, c, out_w, out_h)
    out_data = np.ascontiguousarray(out_data.transpose(0, 1, 3, 2))

    def backward(g):
        if not x.requires_grad:
            return
        gt = np.tensordot(g, rh, axes=([2], [0]))             # (n, c, out_w, h)
        gx = np.tensordot(gt.transpose(0, 1, 3, 2), cw, axes=([3], [0]))
        x.accumulate_grad(np.ascontiguousarray(gx))

    return _result(out_data, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, shape: Sequence[int],
                    fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled symmetric uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Iterable[Tensor],
               step: float = 1e-5, max_checks: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error of reverse-mode grads vs central differences.

    ``f`` re-evaluates the scalar function from the current values of
    ``inputs``, which must be float64. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1). With ``max_checks`` only a seeded random
    subset of coordinates per tensor is probed.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.zero_grad()

    out = f()
    if out.size != 1:
        raise ShapeError("grad_check: f must return a scalar tensor")
    out.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        if a is None:
            a = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            idx = rng.choice(flat.size, size=max_checks, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                f_plus = float(f().data)
            flat[i] = orig - step
            with no_grad():
                f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a_i = float(a.reshape(-1)[i])
            err = abs(a_i - numeric) / max(abs(a_i), abs(numeric), 1.0)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization: "TPN1" flat binary format
# ---------------------------------------------------------------------------

_MAGIC = b"TPN1"
_DTYPE_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: np.dtype(np.float32), 1: np.dtype(np.float64)}


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array: magic, u8 dtype tag, u8 rank, u64 LE dims, raw
    little-endian scalars in row-major order."""
    dt = np.dtype(arr.dtype)
    if dt not in _DTYPE_TAG:
        raise ValueError(f"unsupported dtype {dt}")
    header = _MAGIC + struct.pack("<BB", _DTYPE_TAG[dt], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    body = np.ascontiguousarray(arr).astype(dt.newbyteorder("<"), copy=False).tobytes()
    return header + dims + body


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one serialized tensor; returns (array, next offset)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ValueError("bad magic: not a TPN1 tensor record")
    tag, rank = struct.unpack_from("<BB", buf, offset + 4)
    if tag not in _TAG_DTYPE:
        raise ValueError(f"unknown dtype tag {tag}")
    pos = offset + 6
    dims = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
    pos += 8 * rank
    dt = _TAG_DTYPE[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = count * dt.itemsize
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt.newbyteorder("<")).astype(dt)
    return arr.reshape(dims), pos + nbytes
