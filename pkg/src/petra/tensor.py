"""Dense numeric kernels shared by every other module.

Tensors are plain :class:`numpy.ndarray` values of dtype float32 or float64.
Every function here returns a fresh array and never writes into its inputs,
so arrays can be handed between stage workers without copies.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ValueError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}") from None
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def tensor(data, dtype="f64") -> Tensor:
    """Build a contiguous tensor of the requested float dtype."""
    return np.ascontiguousarray(np.asarray(data, dtype=resolve_dtype(dtype)))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox 4x64) keyed by a 64-bit seed.

    Philox output depends only on (key, counter), so a given seed yields the
    same stream on every platform.
    """
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a + b


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return a - b


def scale(a: Tensor, c: float) -> Tensor:
    return a * a.dtype.type(c)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias, broadcasting over the batch (and spatial) dims."""
    if x.ndim < 2 or bias.shape != (x.shape[1],):
        raise ShapeError("add_channel_bias", x.shape, bias.shape)
    return x + bias.reshape((1, -1) + (1,) * (x.ndim - 2))


def relu(x: Tensor) -> Tensor:
    return np.where(x > 0, x, x.dtype.type(0))


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _windows(x, k, stride):
    """(N, C, Ho, Wo, k, k) strided view of pooling windows."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(x, kh, kw, stride, pad):
    """Patches of ``x`` as an (N, C*kh*kw, Ho*Wo) array."""
    n, c, h, w = x.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel, no bias."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    if _conv_out(h, kh, stride, padding) < 1 or _conv_out(wd, kw, stride, padding) < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = np.matmul(w.reshape(w.shape[0], -1), cols)  # N, O, Ho*Wo
    return out.reshape(x.shape[0], w.shape[0], ho, wo)


def conv2d_grad_input(dout: Tensor, w: Tensor, x_shape, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = dout.shape[2:]
    dcols = np.matmul(w.reshape(o, -1).T, dout.reshape(n, o, ho * wo)).reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def conv2d_grad_weight(dout: Tensor, x: Tensor, w_shape, stride: int = 1, padding: int = 0) -> Tensor:
    cols, ho, wo = _im2col(x, w_shape[2], w_shape[3], stride, padding)
    n, o = dout.shape[:2]
    g = np.matmul(dout.reshape(n, o, ho * wo), cols.transpose(0, 2, 1)).sum(axis=0)
    return g.reshape(w_shape)


def avgpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("avgpool2d", x.shape, (kernel, kernel))
    win = _windows(x, kernel, stride)
    return win.mean(axis=(4, 5))


def avgpool2d_grad(dout: Tensor, x_shape, kernel: int, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    ho, wo = dout.shape[2:]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    g = dout / dout.dtype.type(kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g
    return dx


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None, padding: int = 0):
    """Max pooling; returns (output, flat argmax within each window).

    Ties resolve to the first index in row-major window order.
    """
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("maxpool2d", x.shape, (kernel, kernel))
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = _windows(x, kernel, stride)
    flat = win.reshape(win.shape[:4] + (kernel * kernel,))
    idx = flat.argmax(axis=-1)  # argmax returns the first maximal index
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_grad(dout: Tensor, idx, x_shape, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(kernel):
        for j in range(kernel):
            mask = idx == i * kernel + j
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(mask, dout, 0)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def split_channels(x: Tensor):
    """Split along the channel axis into two equal halves."""
    if x.ndim < 2 or x.shape[1] % 2:
        raise ShapeError("split_channels", x.shape, detail="channel extent must be even")
    half = x.shape[1] // 2
    return np.ascontiguousarray(x[:, :half]), np.ascontiguousarray(x[:, half:])


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat_channels", a.shape, b.shape)
    return np.concatenate([a, b], axis=1)
