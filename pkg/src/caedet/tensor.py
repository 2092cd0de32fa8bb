"""Dense NHWC kernels and their vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` values. Image tensors use the
``[batch, height, width, channels]`` layout, conv kernels are
``[kh, kw, in, out]`` and transposed-conv kernels ``[kh, kw, out, in]``
(the same array a forward conv with swapped roles would use).

All convolutions use SAME padding: output size ``ceil(n / stride)``, with the
odd padding pixel going to the bottom/right edge. The transposed convolution
is defined as the exact linear adjoint of that convolution, so its output is
always ``n * stride``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, NumericError

Tensor = np.ndarray

RELU = "relu"
SIGMOID = "sigmoid"
ACTIVATIONS = (RELU, SIGMOID)


def check_finite(x: Tensor, what: str = "input") -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite value in {what}")


def _expect_rank(x: Tensor, rank: int, what: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank}, got shape {x.shape}")


@dataclass(frozen=True)
class ConvGeometry:
    kernel_height: int
    kernel_width: int
    stride: int
    in_channels: int
    out_channels: int
    padding_mode: str = "SAME"

    def __post_init__(self):
        for name in ("kernel_height", "kernel_width", "stride", "in_channels", "out_channels"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} must be a positive integer")
        if self.padding_mode != "SAME":
            raise DomainError(f"unsupported padding mode {self.padding_mode!r}")

    def output_size(self, n: int) -> int:
        return -(-n // self.stride)

    def padding(self, n: int, kernel: int) -> tuple[int, int]:
        """(low, high) zero padding for one axis of length ``n``."""
        total = max((self.output_size(n) - 1) * self.stride + kernel - n, 0)
        return total // 2, total - total // 2

    def conv_output_shape(self, shape) -> tuple[int, int, int, int]:
        n, h, w, _ = shape
        return n, self.output_size(h), self.output_size(w), self.out_channels

    def transpose_output_shape(self, shape) -> tuple[int, int, int, int]:
        # for a transposed layer, in/out channels refer to the transposed op
        n, h, w, _ = shape
        return n, h * self.stride, w * self.stride, self.out_channels


def _check_conv_args(x, kernel, geom, cin, cout, kernel_name="kernel"):
    _expect_rank(x, 4, "input")
    kh, kw = geom.kernel_height, geom.kernel_width
    if kernel.shape != (kh, kw, cin, cout):
        raise DimensionError(
            f"{kernel_name} shape {kernel.shape} does not match geometry {(kh, kw, cin, cout)}"
        )
    if x.shape[3] != cin:
        raise DimensionError(f"channel axis (3): input has {x.shape[3]} channels, geometry expects {cin}")


def _windows(x: Tensor, geom: ConvGeometry):
    """Strided patches of the zero-padded input, shape (N, Ho, Wo, C, kh, kw)."""
    _, h, w, _ = x.shape
    kh, kw, s = geom.kernel_height, geom.kernel_width, geom.stride
    pt, pb = geom.padding(h, kh)
    pl, pr = geom.padding(w, kw)
    if pt or pb or pl or pr:
        xp = np.zeros((x.shape[0], h + pt + pb, w + pl + pr, x.shape[3]), dtype=x.dtype)
        xp[:, pt : pt + h, pl : pl + w, :] = x
    else:
        xp = x
    ho, wo = geom.output_size(h), geom.output_size(w)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _conv_linear(x: Tensor, kernel: Tensor, geom: ConvGeometry) -> Tensor:
    win = _windows(x, geom)
    return np.tensordot(win, kernel, axes=([3, 4, 5], [2, 0, 1]))


def _conv_input_adjoint(g: Tensor, kernel: Tensor, geom: ConvGeometry, in_shape) -> Tensor:
    """Adjoint of ``_conv_linear`` w.r.t. its input: maps output-shaped g to in_shape."""
    n, h, w, cin = in_shape
    kh, kw, s = geom.kernel_height, geom.kernel_width, geom.stride
    pt, pb = geom.padding(h, kh)
    pl, pr = geom.padding(w, kw)
    ho, wo = g.shape[1], g.shape[2]
    # (N, Ho, Wo, Cout) x (kh, kw, Cin, Cout) -> (N, Ho, Wo, kh, kw, Cin)
    cols = np.tensordot(g, kernel, axes=([3], [3]))
    dxp = np.zeros((n, h + pt + pb, w + pl + pr, cin), dtype=np.result_type(g, kernel))
    for a in range(kh):
        for b in range(kw):
            dxp[:, a : a + (ho - 1) * s + 1 : s, b : b + (wo - 1) * s + 1 : s, :] += cols[:, :, :, a, b, :]
    return dxp[:, pt : pt + h, pl : pl + w, :]


def _conv_kernel_grad(x: Tensor, g: Tensor, geom: ConvGeometry) -> Tensor:
    win = _windows(x, geom)
    # (C, kh, kw, Cout) -> (kh, kw, C, Cout)
    return np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)


def conv2d_forward(x: Tensor, kernel: Tensor, bias: Tensor, geom: ConvGeometry) -> Tensor:
    """Strided SAME convolution (cross-correlation) plus per-channel bias."""
    _check_conv_args(x, kernel, geom, geom.in_channels, geom.out_channels)
    if bias.shape != (geom.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({geom.out_channels},)")
    check_finite(x)
    return _conv_linear(x, kernel, geom) + bias


def conv2d_vjp(x: Tensor, kernel: Tensor, geom: ConvGeometry, grad_out: Tensor):
    """Return (grad_input, grad_kernel, grad_bias) of sum(grad_out * conv2d(x))."""
    _check_conv_args(x, kernel, geom, geom.in_channels, geom.out_channels)
    expected = geom.conv_output_shape(x.shape)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    grad_input = _conv_input_adjoint(grad_out, kernel, geom, x.shape)
    grad_kernel = _conv_kernel_grad(x, grad_out, geom)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    return grad_input, grad_kernel, grad_bias


def _as_forward_geometry(geom: ConvGeometry) -> ConvGeometry:
    # the conv whose adjoint we are: its input has our output channels
    return ConvGeometry(geom.kernel_height, geom.kernel_width, geom.stride,
                        in_channels=geom.out_channels, out_channels=geom.in_channels)


def conv_transpose2d_forward(x: Tensor, kernel: Tensor, bias: Tensor, geom: ConvGeometry) -> Tensor:
    """Upsampling by ``geom.stride``: adjoint of the SAME conv, plus bias.

    ``geom.in_channels``/``out_channels`` describe this transposed op, and
    ``kernel`` has shape ``[kh, kw, out_channels, in_channels]``.
    """
    fwd = _as_forward_geometry(geom)
    _expect_rank(x, 4, "input")
    if kernel.shape != (fwd.kernel_height, fwd.kernel_width, fwd.in_channels, fwd.out_channels):
        raise DimensionError(
            f"kernel shape {kernel.shape} does not match transposed geometry "
            f"{(fwd.kernel_height, fwd.kernel_width, fwd.in_channels, fwd.out_channels)}"
        )
    if x.shape[3] != geom.in_channels:
        raise DimensionError(f"channel axis (3): input has {x.shape[3]} channels, geometry expects {geom.in_channels}")
    if bias.shape != (geom.out_channels,):
        raise DimensionError(f"bias shape {bias.shape} != ({geom.out_channels},)")
    check_finite(x)
    out_shape = geom.transpose_output_shape(x.shape)
    return _conv_input_adjoint(x, kernel, fwd, out_shape) + bias


def conv_transpose2d_vjp(x: Tensor, kernel: Tensor, geom: ConvGeometry, grad_out: Tensor):
    """Return (grad_input, grad_kernel, grad_bias) for ``conv_transpose2d_forward``.

    grad_input is the strided SAME convolution of grad_out with the same kernel.
    """
    _expect_rank(x, 4, "input")
    fwd = _as_forward_geometry(geom)
    expected = geom.transpose_output_shape(x.shape)
    if grad_out.shape != expected:
        raise DimensionError(f"grad_out shape {grad_out.shape} != transposed output shape {expected}")
    _check_conv_args(grad_out, kernel, fwd, fwd.in_channels, fwd.out_channels)
    grad_input = _conv_linear(grad_out, kernel, fwd)
    grad_kernel = _conv_kernel_grad(grad_out, x, fwd)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    return grad_input, grad_kernel, grad_bias


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    _expect_rank(x, 2, "input")
    _expect_rank(weights, 2, "weights")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(f"inner dimension (axis 1): input {x.shape[1]} vs weights {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    check_finite(x)
    return x @ weights + bias


def dense_vjp(x: Tensor, weights: Tensor, grad_out: Tensor):
    _expect_rank(x, 2, "input")
    if x.shape[1] != weights.shape[0] or grad_out.shape != (x.shape[0], weights.shape[1]):
        raise DimensionError(
            f"dense_vjp shapes disagree: input {x.shape}, weights {weights.shape}, grad_out {grad_out.shape}"
        )
    return grad_out @ weights.T, x.T @ grad_out, grad_out.sum(axis=0)


def sigmoid(x: Tensor) -> Tensor:
    """Overflow-free logistic function, clipped so results stay strictly inside (0, 1)."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    dt = x.dtype
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(dt, copy=False)
    return np.clip(out, np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))


def activation_forward(x: Tensor, kind: str) -> Tensor:
    check_finite(x)
    if kind == RELU:
        return np.maximum(x, 0)
    if kind == SIGMOID:
        return sigmoid(x)
    raise DomainError(f"unknown activation {kind!r}")


def activation_vjp(x: Tensor, kind: str, grad_out: Tensor) -> Tensor:
    if grad_out.shape != x.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if kind == RELU:
        # subgradient at exactly 0 is 0
        return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)
    if kind == SIGMOID:
        s = sigmoid(x)
        return grad_out * s * (1 - s)
    raise DomainError(f"unknown activation {kind!r}")


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))
