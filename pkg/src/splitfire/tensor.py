"""Dense float tensors and the hand-written numeric kernels behind every layer.

All kernels are pure functions of their inputs: same arguments, bit-identical
results. Runtime precision is float32; float64 is supported for gradient
checking only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError, ValidationError

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Immutable dense N-d array of 32-bit (or shadow 64-bit) floats.

    Invariants enforced at construction: shape non-empty, every dim >= 1,
    all values finite.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if arr.ndim == 0:
            raise DimensionError("tensor shape must be non-empty (rank >= 1)")
        if dtype is None:
            # float64 is preserved only when handed an actual float64 array
            # (the gradient-checking shadow mode); everything else runs float32
            preserve = isinstance(data, (np.ndarray, Tensor)) and arr.dtype == np.float64
            dtype = np.float64 if preserve else np.float32
        if np.dtype(dtype) not in (np.dtype(d) for d in SUPPORTED_DTYPES):
            raise ValidationError(f"unsupported tensor dtype {dtype!r}")
        arr = np.ascontiguousarray(arr, dtype=dtype)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"every dimension must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor contains NaN or Inf")
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def astype(self, dtype):
        return Tensor(self.data, dtype=dtype)

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def full(cls, shape, value, dtype=np.float32):
        return cls(np.full(shape, value, dtype=dtype))

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype})"


@dataclass(frozen=True)
class ConvGeometry:
    """Validated geometry of a 2-d convolution (exact output division only)."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w"):
            if getattr(self, name) < 1:
                raise ValidationError(f"ConvGeometry.{name} must be >= 1")
        if self.stride < 1:
            raise ValidationError("ConvGeometry.stride must be >= 1")
        if self.padding < 0:
            raise ValidationError("ConvGeometry.padding must be >= 0")

    def out_size(self, h, w):
        oh, rh = divmod(h + 2 * self.padding - self.kernel_h, self.stride)
        ow, rw = divmod(w + 2 * self.padding - self.kernel_w, self.stride)
        if rh or rw or oh < 0 or ow < 0:
            raise DimensionError(
                f"conv geometry {self} does not divide input {h}x{w} exactly"
            )
        return oh + 1, ow + 1


def _require_shape(t, ndim, what):
    if len(t.shape) != ndim:
        raise DimensionError(f"{what} must be rank {ndim}, got shape {list(t.shape)}")


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_cols(xp, kh, kw, stride, oh, ow):
    # [N, C, H, W] -> [N*oh*ow, C*kh*kw] window matrix
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C, oh, ow, kh, kw]
    n, c = xp.shape[0], xp.shape[1]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def conv2d_forward_cols(x, kernels, bias, geom):
    """conv2d_forward that also returns the im2col window matrix for reuse."""
    _require_shape(x, 4, "conv input")
    _require_shape(kernels, 4, "conv kernels")
    _require_shape(bias, 1, "conv bias")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    if (kc, kh, kw) != (geom.in_channels, geom.kernel_h, geom.kernel_w) or f != geom.out_channels:
        raise DimensionError(f"kernel shape {list(kernels.shape)} does not match geometry {geom}")
    if c != geom.in_channels:
        raise DimensionError(
            f"input channels {c} != kernel channels {geom.in_channels} "
            f"(input {list(x.shape)}, kernels {list(kernels.shape)})"
        )
    if bias.shape != (f,):
        raise DimensionError(f"bias shape {list(bias.shape)} != [{f}]")
    oh, ow = geom.out_size(h, w)
    xp = _pad_spatial(x.data, geom.padding)
    cols = _conv_cols(xp, kh, kw, geom.stride, oh, ow)
    out = cols @ kernels.data.reshape(f, -1).T  # [N*oh*ow, F]
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2) + bias.data.reshape(1, f, 1, 1)
    return Tensor(np.ascontiguousarray(out)), cols


def conv2d_forward(x, kernels, bias, geom):
    """Cross-correlation (no kernel flip) of [N,C,H,W] with [F,C,kh,kw] + bias."""
    out, _ = conv2d_forward_cols(x, kernels, bias, geom)
    return out


def conv2d_backward(x, kernels, grad_out, geom, cols=None, need_input_grad=True):
    """Gradients of conv2d_forward w.r.t. (input, kernels, bias).

    cols may carry the window matrix from conv2d_forward_cols to avoid
    rebuilding it. With need_input_grad=False the input gradient is skipped
    and returned as None."""
    _require_shape(grad_out, 4, "conv grad_out")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernels.shape
    oh, ow = geom.out_size(h, w)
    if grad_out.shape != (n, f, oh, ow):
        raise DimensionError(
            f"grad_out shape {list(grad_out.shape)} != forward output [{n},{f},{oh},{ow}]"
        )
    s, p = geom.stride, geom.padding
    xp = _pad_spatial(x.data, p)
    if cols is None:
        cols = _conv_cols(xp, kh, kw, s, oh, ow)
    go_rows = grad_out.data.transpose(0, 2, 3, 1).reshape(n * oh * ow, f)

    grad_k = (go_rows.T @ cols).reshape(f, c, kh, kw)
    grad_b = grad_out.data.sum(axis=(0, 2, 3))

    if not need_input_grad:
        return (
            None,
            Tensor(np.ascontiguousarray(grad_k)),
            Tensor(np.ascontiguousarray(grad_b)),
        )
    gcols = go_rows @ kernels.data.reshape(f, -1)  # [N*oh*ow, C*kh*kw]
    gcols = gcols.reshape(n, oh, ow, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
    return (
        Tensor(np.ascontiguousarray(gx)),
        Tensor(np.ascontiguousarray(grad_k)),
        Tensor(np.ascontiguousarray(grad_b)),
    )


def maxpool2_forward(x, want_argmax=True):
    """2x2 non-overlapping max pool; returns (output, argmax window positions).

    Argmax positions are row-major within each window (0..3); ties go to the
    lowest position. Spatial dims must be even. Inference callers can pass
    want_argmax=False to skip the position bookkeeping (idx is None then).
    """
    _require_shape(x, 4, "pool input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    d = x.data
    s0, s1 = d[:, :, 0::2, 0::2], d[:, :, 0::2, 1::2]
    s2, s3 = d[:, :, 1::2, 0::2], d[:, :, 1::2, 1::2]
    out = np.maximum(np.maximum(s0, s1), np.maximum(s2, s3))
    if not want_argmax:
        return Tensor(np.ascontiguousarray(out)), None
    # row-major window position of the first maximum
    idx = np.where(s0 == out, 0, np.where(s1 == out, 1, np.where(s2 == out, 2, 3)))
    return Tensor(np.ascontiguousarray(out)), idx.astype(np.int8)


def maxpool2_backward(grad_out, argmax_indices):
    """Route each output gradient to its recorded argmax position."""
    _require_shape(grad_out, 4, "pool grad_out")
    idx = np.asarray(argmax_indices)
    if idx.shape != grad_out.shape:
        raise DimensionError(
            f"argmax shape {list(idx.shape)} != grad_out shape {list(grad_out.shape)}"
        )
    if idx.min() < 0 or idx.max() > 3:
        raise ValidationError("corrupt argmax indices: values outside window range 0..3")
    n, c, oh, ow = grad_out.shape
    go = grad_out.data
    gx = np.zeros((n, c, 2 * oh, 2 * ow), dtype=grad_out.dtype)
    gx[:, :, 0::2, 0::2] = go * (idx == 0)
    gx[:, :, 0::2, 1::2] = go * (idx == 1)
    gx[:, :, 1::2, 0::2] = go * (idx == 2)
    gx[:, :, 1::2, 1::2] = go * (idx == 3)
    return Tensor(gx)


def dense_forward(x, weights, bias):
    """Affine map: x[N,D] @ weights[D,K] + bias[K]."""
    _require_shape(x, 2, "dense input")
    _require_shape(weights, 2, "dense weights")
    _require_shape(bias, 1, "dense bias")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense inner dims disagree: input {list(x.shape)} vs weights {list(weights.shape)}"
        )
    if bias.shape[0] != weights.shape[1]:
        raise DimensionError(f"bias shape {list(bias.shape)} != [{weights.shape[1]}]")
    return Tensor(x.data @ weights.data + bias.data)


def dense_backward(x, weights, grad_out):
    """Gradients of dense_forward w.r.t. (input, weights, bias)."""
    _require_shape(grad_out, 2, "dense grad_out")
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise DimensionError(
            f"grad_out shape {list(grad_out.shape)} != [{x.shape[0]},{weights.shape[1]}]"
        )
    gx = grad_out.data @ weights.data.T
    gw = x.data.T @ grad_out.data
    gb = grad_out.data.sum(axis=0)
    return Tensor(gx), Tensor(gw), Tensor(gb)


ACTIVATION_KINDS = ("relu", "sigmoid")


def activation(x, kind):
    """Elementwise relu or numerically stable sigmoid."""
    if kind == "relu":
        return Tensor(np.maximum(x.data, 0))
    if kind == "sigmoid":
        z = x.data
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return Tensor(out)
    raise ValidationError(f"unknown activation kind {kind!r}")


def activation_backward(grad_out, out, kind):
    """Backward pass given the forward *output* (relu'(0) is 0)."""
    if grad_out.shape != out.shape:
        raise DimensionError(
            f"grad shape {list(grad_out.shape)} != activation shape {list(out.shape)}"
        )
    if kind == "relu":
        return Tensor(grad_out.data * (out.data > 0))
    if kind == "sigmoid":
        return Tensor(grad_out.data * out.data * (1.0 - out.data))
    raise ValidationError(f"unknown activation kind {kind!r}")


def concat(parts, axis):
    """Stack tensors along axis in the given order."""
    if not parts:
        raise ValidationError("concat requires at least one part")
    first = parts[0].shape
    if axis < 0 or axis >= len(first):
        raise DimensionError(f"axis {axis} out of range for rank {len(first)}")
    for i, p in enumerate(parts[1:], start=1):
        other = list(p.shape)
        ref = list(first)
        other[axis] = ref[axis] = -1
        if other != ref:
            raise DimensionError(
                f"concat part {i} shape {list(p.shape)} incompatible with part 0 {list(first)}"
            )
    return Tensor(np.concatenate([p.data for p in parts], axis=axis))


def split_axis(t, axis, sizes):
    """Exact inverse of concat: slice t along axis into the given sizes."""
    if axis < 0 or axis >= len(t.shape):
        raise DimensionError(f"axis {axis} out of range for rank {len(t.shape)}")
    if any(s < 1 for s in sizes):
        raise ValidationError("split sizes must all be >= 1")
    if sum(sizes) != t.shape[axis]:
        raise DimensionError(
            f"split sizes {list(sizes)} sum to {sum(sizes)}, axis length is {t.shape[axis]}"
        )
    offsets = np.cumsum(sizes)[:-1]
    return [Tensor(np.ascontiguousarray(p)) for p in np.split(t.data, offsets, axis=axis)]
