"""Dense rank-4 tensors (NCHW) and the fixed neural operator set.

The whole pipeline moves data exclusively as :class:`Tensor4` values with
static shapes: batch, channels, height, width. Operators are pure functions,
accumulate in float64 regardless of the nominal storage precision of model
weights, and validate that no non-finite value ever leaves an operator.

Convolution uses the cross-correlation convention (no kernel flip), average
pooling excludes zero padding from the divisor, and bilinear interpolation
uses the half-pixel (align_corners=false) mapping — the defaults of the
ecosystem that pretrained weights are exported from. Output extents follow
the conventional floor rule ``floor((h + 2p - k) / s) + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor4",
    "ConvSpec",
    "conv2d",
    "activation",
    "pool2d",
    "bilinear_resize",
    "concat_channels",
    "add",
    "fold_batchnorm",
    "conv_output_extent",
]


class Tensor4:
    """Immutable dense rank-4 array, NCHW order, float64 storage.

    The element count always equals ``n*c*h*w`` (row-major), the payload is
    finite, and the shape never changes for the life of the value. Zero
    extents are permitted (an empty tensor is a valid concat operand).
    """

    __slots__ = ("values",)

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C", copy=True)
        self._install(arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor4":
        """Adopt a freshly computed array without copying. Internal."""
        t = object.__new__(cls)
        t._install(np.ascontiguousarray(arr, dtype=np.float64))
        return t

    def _install(self, arr: np.ndarray) -> None:
        if arr.ndim != 4:
            raise ContractError(f"Tensor4 requires rank 4, got shape {arr.shape}")
        if arr.size and not np.isfinite(arr).all():
            raise ContractError("Tensor4 payload contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor4 is immutable")

    @classmethod
    def from_flat(cls, n: int, c: int, h: int, w: int, data) -> "Tensor4":
        flat = np.asarray(data, dtype=np.float64).ravel()
        if flat.size != n * c * h * w:
            raise ContractError(
                f"flat payload has {flat.size} elements, shape ({n},{c},{h},{w}) "
                f"needs {n * c * h * w}"
            )
        return cls(flat.reshape(n, c, h, w))

    @classmethod
    def zeros(cls, n: int, c: int, h: int, w: int) -> "Tensor4":
        return cls._wrap(np.zeros((n, c, h, w)))

    @classmethod
    def full(cls, n: int, c: int, h: int, w: int, value: float) -> "Tensor4":
        return cls._wrap(np.full((n, c, h, w), float(value)))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def c(self) -> int:
        return self.values.shape[1]

    @property
    def h(self) -> int:
        return self.values.shape[2]

    @property
    def w(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def flat(self) -> np.ndarray:
        """Row-major flat view of the payload (read-only)."""
        return self.values.reshape(-1)

    def __repr__(self) -> str:
        return f"Tensor4{self.shape}"


@dataclass(frozen=True)
class ConvSpec:
    """A 2D convolution kernel: weights (out_ch, in_ch, kh, kw) + optional bias."""

    out_ch: int
    in_ch: int
    kh: int
    kw: int
    stride: int
    padding: int
    weights: np.ndarray = field(repr=False)
    bias: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        # copy so caller arrays never become read-only behind their back
        w = np.array(self.weights, dtype=np.float64, order="C", copy=True)
        expect = (self.out_ch, self.in_ch, self.kh, self.kw)
        if w.size != self.out_ch * self.in_ch * self.kh * self.kw:
            raise ContractError(
                f"conv weights have {w.size} elements, spec {expect} needs "
                f"{np.prod(expect)}"
            )
        w = w.reshape(expect)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if self.bias is not None:
            b = np.array(self.bias, dtype=np.float64, order="C", copy=True)
            if b.shape != (self.out_ch,):
                raise ContractError(
                    f"conv bias has shape {b.shape}, expected ({self.out_ch},)"
                )
            b.setflags(write=False)
            object.__setattr__(self, "bias", b)
        if self.stride < 1:
            raise ContractError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ContractError(f"padding must be non-negative, got {self.padding}")

    @property
    def param_count(self) -> int:
        n = self.out_ch * self.in_ch * self.kh * self.kw
        if self.bias is not None:
            n += self.out_ch
        return n


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    """floor((extent + 2*padding - k) / stride) + 1, validated positive."""
    span = extent + 2 * padding - k
    if span < 0:
        raise ContractError(
            f"window {k} exceeds padded extent {extent + 2 * padding}"
        )
    out = span // stride + 1
    if out < 1:
        raise ContractError(f"output extent {out} is not positive")
    return out


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(n, c, h_out, w_out, kh, kw) sliding windows over a padded NCHW array."""
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride, :, :]


def conv2d(x: Tensor4, spec: ConvSpec) -> Tensor4:
    """Cross-correlate x with the kernel bank in spec (zero padding).

    Output shape is (n, out_ch, h', w') with the floor extent rule. The
    accumulation runs in float64 via an im2col matmul.
    """
    if x.c != spec.in_ch:
        raise ContractError(
            f"conv2d input has {x.c} channels but spec expects {spec.in_ch} "
            f"(input shape {x.shape}, kernel shape {spec.weights.shape})"
        )
    h_out = conv_output_extent(x.h, spec.kh, spec.stride, spec.padding)
    w_out = conv_output_extent(x.w, spec.kw, spec.stride, spec.padding)
    p = spec.padding
    padded = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)))
    win = _windows(padded, spec.kh, spec.kw, spec.stride)
    # (n, h_out, w_out, c*kh*kw) @ (c*kh*kw, out_ch)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.n, h_out * w_out, -1)
    kernel = spec.weights.reshape(spec.out_ch, -1).T
    out = cols @ kernel
    if spec.bias is not None:
        out = out + spec.bias
    out = out.reshape(x.n, h_out, w_out, spec.out_ch).transpose(0, 3, 1, 2)
    return Tensor4._wrap(out)


def activation(x: Tensor4, kind: str, slope: float = 0.0) -> Tensor4:
    """Elementwise relu or leaky_relu(slope); shape preserved."""
    if kind == "relu":
        slope = 0.0
    elif kind == "leaky_relu":
        if not 0.0 <= slope < 1.0:
            raise ContractError(f"leaky_relu slope must be in [0,1), got {slope}")
    else:
        raise ContractError(f"unknown activation kind {kind!r}")
    v = x.values
    return Tensor4._wrap(np.where(v < 0, slope * v, v))


def pool2d(x: Tensor4, kind: str, k: int, stride: int, padding: int = 0) -> Tensor4:
    """Per-channel window reduction (max or avg).

    Average pooling divides by the number of non-padding cells in each window
    (count_include_pad=false convention).
    """
    if kind not in ("max", "avg"):
        raise ContractError(f"unknown pool kind {kind!r}")
    if k < 1 or stride < 1 or padding < 0:
        raise ContractError(f"bad pool geometry k={k} stride={stride} padding={padding}")
    h_out = conv_output_extent(x.h, k, stride, padding)
    w_out = conv_output_extent(x.w, k, stride, padding)
    p = padding
    if kind == "max":
        padded = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)),
                        constant_values=-np.inf)
        out = _windows(padded, k, k, stride).max(axis=(4, 5))
    else:
        padded = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p)))
        sums = _windows(padded, k, k, stride).sum(axis=(4, 5))
        ones = np.pad(np.ones((1, 1, x.h, x.w)), ((0, 0), (0, 0), (p, p), (p, p)))
        counts = _windows(ones, k, k, stride).sum(axis=(4, 5))
        if np.any(counts == 0):
            raise ContractError("avg pool window lies entirely in padding")
        out = sums / counts
    _ = h_out, w_out  # extents validated above; shapes follow from the windows
    return Tensor4._wrap(out)


def bilinear_resize(x: Tensor4, out_h: int, out_w: int) -> Tensor4:
    """Per-channel bilinear interpolation, half-pixel (align_corners=false)."""
    if out_h < 1 or out_w < 1:
        raise ContractError(f"resize extents must be positive, got ({out_h},{out_w})")
    if x.h == 0 or x.w == 0:
        raise ContractError(f"cannot resize from empty spatial extents {x.shape}")
    if (out_h, out_w) == (x.h, x.w):
        return Tensor4._wrap(x.values.copy())

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        lo = np.minimum(lo, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(x.h, out_h)
    x0, x1, fx = axis_coords(x.w, out_w)
    v = x.values
    # lerp form keeps constant inputs bit-exact
    top = v[:, :, y0[:, None], x0[None, :]]
    top = top + fx[None, None, None, :] * (v[:, :, y0[:, None], x1[None, :]] - top)
    bot = v[:, :, y1[:, None], x0[None, :]]
    bot = bot + fx[None, None, None, :] * (v[:, :, y1[:, None], x1[None, :]] - bot)
    out = top + fy[None, None, :, None] * (bot - top)
    return Tensor4._wrap(out)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    """Stack b's channels after a's; batch and spatial extents must agree."""
    if (a.n, a.h, a.w) != (b.n, b.h, b.w):
        raise ContractError(
            f"concat_channels operands disagree outside the channel axis: "
            f"{a.shape} vs {b.shape}"
        )
    return Tensor4._wrap(np.concatenate([a.values, b.values], axis=1))


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    """Elementwise sum (residual connections); shapes must match exactly."""
    if a.shape != b.shape:
        raise ContractError(f"add operands have different shapes: {a.shape} vs {b.shape}")
    return Tensor4._wrap(a.values + b.values)


def fold_batchnorm(conv: ConvSpec, gamma, beta, mean, var, eps: float) -> ConvSpec:
    """Fold an inference-time batchnorm into the preceding convolution.

    Returns conv' with w' = w * gamma / sqrt(var + eps) (per output channel)
    and b' = (b - mean) * gamma / sqrt(var + eps) + beta, so that
    conv'(x) == batchnorm(conv(x)) for all x.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    for name, arr in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if arr.shape != (conv.out_ch,):
            raise ContractError(
                f"batchnorm {name} has shape {arr.shape}, expected ({conv.out_ch},)"
            )
    if np.any(var < 0):
        raise ContractError("batchnorm variance must be non-negative")
    scale = gamma / np.sqrt(var + eps)
    w = conv.weights * scale[:, None, None, None]
    b = conv.bias if conv.bias is not None else np.zeros(conv.out_ch)
    b = (b - mean) * scale + beta
    return ConvSpec(conv.out_ch, conv.in_ch, conv.kh, conv.kw,
                    conv.stride, conv.padding, weights=w, bias=b)
