"""Dense-tensor layer kernel.

All layer math operates on single frames laid out channel-first as
``(C, H, W)`` numpy arrays (a leading batch extent of 1 is accepted and
stripped).  Every layer implements an explicit ``forward`` that caches
whatever the matching ``backward`` needs; parameter gradients accumulate
into :class:`ParamState.gradient` and are cleared by the optimizer.

Production code runs in float32; gradient checking runs the same code in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor extents are inconsistent with a layer's contract."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, tuple):
        return v
    return (v, v)


def strip_batch(x: np.ndarray) -> np.ndarray:
    """Accept an optional leading batch extent of 1 and drop it."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ShapeError(f"batch extent must be 1, got {x.shape[0]}")
        return x[0]
    return x


@dataclass
class ParamState:
    """One learnable tensor plus its gradient and momentum buffer.

    The three arrays always share one shape and dtype.
    """

    value: np.ndarray
    gradient: np.ndarray
    momentum_buffer: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "ParamState":
        return cls(value, np.zeros_like(value), np.zeros_like(value))

    def clear_gradient(self) -> None:
        self.gradient[...] = 0


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int,
           pad_h: int, pad_w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Unfold ``(C, H, W)`` into ``(C*kh*kw, Ho*Wo)`` patch columns."""
    c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad_h)
    wo = conv_out_size(w, kw, stride, pad_w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output extent would be {ho}x{wo} for input {h}x{w}, "
                         f"kernel {kh}x{kw}, stride {stride}, pad ({pad_h},{pad_w})")
    if pad_h or pad_w:
        x = np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo), (ho, wo)


def col2im(dcols: np.ndarray, x_shape: tuple[int, int, int], kh: int, kw: int,
           stride: int, pad_h: int, pad_w: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Scatter-add patch-column gradients back to the input layout."""
    c, h, w = x_shape
    ho, wo = out_hw
    dxp = np.zeros((c, h + 2 * pad_h, w + 2 * pad_w), dtype=dcols.dtype)
    dcols = dcols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad_h or pad_w:
        return dxp[:, pad_h:pad_h + h, pad_w:pad_w + w]
    return dxp


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int = 1, pad: int | tuple[int, int] = 0):
    """Cross-correlation of a ``(C,H,W)`` frame with ``(Cout,Cin,kh,kw)`` weights.

    Returns ``(y, cache)``; pass the cache to :func:`conv2d_backward`.
    """
    x = strip_batch(x)
    cout, cin, kh, kw = w.shape
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, weights expect {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias extent {b.shape} != out_channels ({cout},)")
    ph, pw = _pair(pad)
    cols, (ho, wo) = im2col(x, kh, kw, stride, ph, pw)
    y = (w.reshape(cout, -1) @ cols).reshape(cout, ho, wo)
    if b is not None:
        y += b[:, None, None]
    return y, (x.shape, cols, stride, ph, pw, (ho, wo))


def conv2d_backward(dy: np.ndarray, w: np.ndarray, cache):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weights and bias."""
    x_shape, cols, stride, ph, pw, (ho, wo) = cache
    cout, cin, kh, kw = w.shape
    dy = strip_batch(dy)
    if dy.shape != (cout, ho, wo):
        raise ShapeError(f"conv2d backward: upstream gradient {dy.shape} != output ({cout},{ho},{wo})")
    dy_mat = dy.reshape(cout, -1)
    dw = (dy_mat @ cols.T).reshape(w.shape)
    db = dy.sum(axis=(1, 2))
    dcols = w.reshape(cout, -1).T @ dy_mat
    dx = col2im(dcols, x_shape, kh, kw, stride, ph, pw, (ho, wo))
    return dx, dw, db


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    """Normalize each channel by its own spatial statistics on this frame."""
    x = strip_batch(x)
    c, h, w = x.shape
    if h * w == 0:
        raise ShapeError("batchnorm: zero spatial extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta extent must be ({c},), "
                         f"got {gamma.shape}/{beta.shape}")
    if eps <= 0:
        raise ValueError("batchnorm: eps must be > 0")
    mean = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, (xhat, inv_std, gamma)


def batchnorm_backward(dy: np.ndarray, cache):
    """Gradient flow through the per-frame statistics."""
    xhat, inv_std, gamma = cache
    dy = strip_batch(dy)
    n = xhat.shape[1] * xhat.shape[2]
    dgamma = (dy * xhat).sum(axis=(1, 2))
    dbeta = dy.sum(axis=(1, 2))
    dxhat = dy * gamma[:, None, None]
    s1 = dxhat.sum(axis=(1, 2), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
    dx = inv_std * (dxhat - s1 / n - xhat * s2 / n)
    return dx, dgamma, dbeta


def resize_weights(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic interpolation matrix for one axis.

    Half-pixel-center coordinate mapping with edge clamping; each output
    sample mixes at most two input cells.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = (src - i0).astype(dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - f)
    np.add.at(m, (rows, i1), f)
    return m


def bilinear_resize_forward(x: np.ndarray, out_hw: tuple[int, int]):
    """Bilinear resample to an explicit target extent (a factor ``r`` maps to
    ``(H*r, W*r)``)."""
    x = strip_batch(x)
    c, h, w = x.shape
    ho, wo = out_hw
    if ho < 1 or wo < 1:
        raise ShapeError(f"bilinear_resize: target extent {ho}x{wo} invalid")
    if (ho, wo) == (h, w):
        return x, (x.shape, None, None)
    mh = resize_weights(h, ho, x.dtype)
    mw = resize_weights(w, wo, x.dtype)
    y = np.einsum("oh,chw,pw->cop", mh, x, mw, optimize=True)
    return y, (x.shape, mh, mw)


def bilinear_resize_backward(dy: np.ndarray, cache):
    """Scatter output gradients to the contributing input cells."""
    x_shape, mh, mw = cache
    dy = strip_batch(dy)
    if mh is None:
        return dy
    return np.einsum("oh,cop,pw->chw", mh, dy, mw, optimize=True)


class Layer:
    """Minimal forward/backward protocol shared by all layers."""

    name = "layer"

    def params(self):
        return []

    def forward(self, x):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, dy):  # pragma: no cover - interface
        raise NotImplementedError


def _he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Layer):
    """Convolution with "same" padding by default (pad = kernel // 2)."""

    name = "Conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel=3, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32, pad: int | tuple[int, int] | str = "same"):
        if in_channels < 1 or out_channels < 1:
            raise ShapeError("conv2d: channel counts must be >= 1")
        if stride < 1:
            raise ValueError("conv2d: stride must be >= 1")
        kh, kw = _pair(kernel)
        if pad == "same":
            pad = (kh // 2, kw // 2)
        self.stride = stride
        self.pad = _pair(pad)
        if min(self.pad) < 0:
            raise ValueError("conv2d: pad must be >= 0")
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kh * kw
        self.w = ParamState.of(_he_init(rng, (out_channels, in_channels, kh, kw), fan_in, dtype))
        self.b = ParamState.of(np.zeros(out_channels, dtype=dtype)) if bias else None
        self._cache = None

    def params(self):
        out = [("weight", self.w)]
        if self.b is not None:
            out.append(("bias", self.b))
        return out

    def forward(self, x):
        y, self._cache = conv2d_forward(x, self.w.value,
                                        None if self.b is None else self.b.value,
                                        self.stride, self.pad)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("conv2d backward requires the saved forward input")
        dx, dw, db = conv2d_backward(dy, self.w.value, self._cache)
        self.w.gradient += dw
        if self.b is not None:
            self.b.gradient += db
        return dx


class SeparableConv(Layer):
    """A 1x3 convolution followed by a 3x1 convolution (both "same"-padded)."""

    name = "SeparableConv"

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1,
                 bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.conv_1x3 = Conv2d(in_channels, out_channels, (1, 3), stride, bias, rng, dtype)
        self.conv_3x1 = Conv2d(out_channels, out_channels, (3, 1), 1, bias, rng, dtype)

    def params(self):
        return ([("1x3." + n, p) for n, p in self.conv_1x3.params()]
                + [("3x1." + n, p) for n, p in self.conv_3x1.params()])

    def forward(self, x):
        return self.conv_3x1.forward(self.conv_1x3.forward(x))

    def backward(self, dy):
        return self.conv_1x3.backward(self.conv_3x1.backward(dy))


class BatchNorm(Layer):
    """Per-frame spatial batch normalization (batch size is always 1 here, so
    no running statistics are kept)."""

    name = "BatchNorm"

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = ParamState.of(np.ones(channels, dtype=dtype))
        self.beta = ParamState.of(np.zeros(channels, dtype=dtype))
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x):
        y, self._cache = batchnorm_forward(x, self.gamma.value, self.beta.value, self.eps)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("batchnorm backward requires a saved forward")
        dx, dgamma, dbeta = batchnorm_backward(dy, self._cache)
        self.gamma.gradient += dgamma
        self.beta.gradient += dbeta
        return dx


class ReLU(Layer):
    name = "ReLU"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        x = strip_batch(x)
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return strip_batch(dy) * self._mask


class BilinearResize(Layer):
    """Resize by an integer factor, or to an explicit target passed at call time."""

    name = "BilinearResize"

    def __init__(self, factor: int = 1):
        if factor < 1:
            raise ValueError("bilinear_resize: factor must be >= 1")
        self.factor = factor
        self._cache = None

    def forward(self, x, out_hw: tuple[int, int] | None = None):
        x = strip_batch(x)
        if out_hw is None:
            out_hw = (x.shape[1] * self.factor, x.shape[2] * self.factor)
        y, self._cache = bilinear_resize_forward(x, out_hw)
        return y

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("bilinear_resize backward requires a saved forward")
        return bilinear_resize_backward(dy, self._cache)


class Concat(Layer):
    """Channel-axis concatenation of two feature maps with equal extents."""

    name = "Concat"

    def __init__(self):
        self._split = None

    def forward(self, a, b):
        a, b = strip_batch(a), strip_batch(b)
        if a.shape[1:] != b.shape[1:]:
            raise ShapeError(f"concat: spatial extents differ, {a.shape[1:]} vs {b.shape[1:]}")
        self._split = a.shape[0]
        return np.concatenate([a, b], axis=0)

    def backward(self, dy):
        dy = strip_batch(dy)
        return dy[:self._split], dy[self._split:]
