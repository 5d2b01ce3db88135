"""Dense NCHW tensor kernels with hand-written backward passes.

Every network in this package is assembled from the ops below: direct
(im2col) convolution, transposed convolution, ReLU, max pooling, global
average pooling, dense layers, and softmax cross-entropy.  All ops are pure
functions of their inputs; parameters are plain numpy arrays owned by the
caller.  float32 is the working precision; float64 inputs are supported for
gradient checking and propagate through unchanged.

Tensors are numpy arrays of shape (batch, channels, height, width) in
row-major order.  Backward passes are hand-wired per network; there is no
computation-graph engine here.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32

_tls = threading.local()


def _scratch(tag: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable per-thread workspace (fresh large allocations page-fault).

    Contents are only valid until the next request for the same key, so
    every user fully consumes its buffer before any further kernel call.
    """
    pool = getattr(_tls, "pool", None)
    if pool is None:
        pool = _tls.pool = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = pool.get(key)
    if buf is None:
        buf = pool[key] = np.empty(shape, dtype)
    return buf


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one (de)convolution: channel counts, kernel, stride, padding."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = True
    transposed: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(
                f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(
                f"channel counts must be >= 1, got in={self.in_channels} "
                f"out={self.out_channels}"
            )

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        """Output spatial size for an h-by-w input; rejects non-positive results."""
        if self.transposed:
            oh = (h - 1) * self.stride - 2 * self.padding + self.kernel_h
            ow = (w - 1) * self.stride - 2 * self.padding + self.kernel_w
        else:
            oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
            ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh <= 0:
            raise ValueError(f"output height {oh} <= 0 for input height {h}")
        if ow <= 0:
            raise ValueError(f"output width {ow} <= 0 for input width {w}")
        return oh, ow


def _require_nchw(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (N,C,H,W), got {x.ndim}-D")


def _unfold(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather patches of (N,C,H,W) into (N, C*kh*kw, oh*ow).

    The kernel-major layout keeps every later reshape copy-free; the batched
    GEMM below runs directly against it.
    """
    n, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if padding > 0:
        xp = _scratch("pad", (n, c, h + 2 * padding, w + 2 * padding), x.dtype)
        xp[:] = 0
        xp[:, :, padding : padding + h, padding : padding + w] = x
        x = xp
    col = _scratch("unfold", (n, c, kh, kw, oh, ow), x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            col[:, :, i, j] = x[:, :, i:i_end:stride, j:j_end:stride]
    return col.reshape(n, c * kh * kw, oh * ow)


def _fold(
    col: np.ndarray,
    shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of _unfold: scatter-add (N, C*kh*kw, oh*ow) back to (N,C,H,W)."""
    n, c, h, w = shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    col = col.reshape(n, c, kh, kw, oh, ow)
    img = _scratch("fold", (n, c, h + 2 * padding, w + 2 * padding), col.dtype)
    img[:] = 0
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            img[:, :, i:i_end:stride, j:j_end:stride] += col[:, :, i, j]
    return img[:, :, padding : padding + h, padding : padding + w].copy()


def _check_conv_args(x, weight, spec, want_transposed: bool) -> None:
    _require_nchw(x, "input")
    if spec.transposed != want_transposed:
        op = "deconv2d" if want_transposed else "conv2d"
        raise ValueError(f"{op} requires spec.transposed={want_transposed}")
    if weight.ndim != 4:
        raise ValueError(f"weight must be 4-D, got {weight.ndim}-D")
    if want_transposed:
        wc_in, wc_out = weight.shape[0], weight.shape[1]
    else:
        wc_out, wc_in = weight.shape[0], weight.shape[1]
    if (wc_in, wc_out) != (spec.in_channels, spec.out_channels):
        raise ValueError(
            f"weight channels ({wc_in} in, {wc_out} out) do not match spec "
            f"({spec.in_channels} in, {spec.out_channels} out)"
        )
    if weight.shape[2:] != (spec.kernel_h, spec.kernel_w):
        raise ValueError(
            f"weight kernel {weight.shape[2]}x{weight.shape[3]} does not match "
            f"spec {spec.kernel_h}x{spec.kernel_w}"
        )
    if x.shape[1] != spec.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )


def conv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> np.ndarray:
    """Direct convolution; weight is (out_ch, in_ch, kh, kw)."""
    _check_conv_args(x, weight, spec, want_transposed=False)
    n, _, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    col = _unfold(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    out = weight.reshape(spec.out_channels, -1) @ col  # (n, out_ch, oh*ow)
    if bias is not None:
        out += bias[None, :, None]
    return out.reshape(n, spec.out_channels, oh, ow)


def conv2d_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    spec: ConvSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a conv2d output sum w.r.t. input, weight, and bias."""
    _check_conv_args(x, weight, spec, want_transposed=False)
    n, _, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, spec.out_channels, oh, ow)}"
        )
    gy = grad_out.reshape(n, spec.out_channels, oh * ow)
    col = _unfold(x, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding)
    k = col.shape[1]
    gw_batch = _scratch("gw", (n, spec.out_channels, k), col.dtype)
    np.matmul(gy, col.transpose(0, 2, 1), out=gw_batch)
    grad_weight = gw_batch.sum(axis=0).reshape(weight.shape)
    grad_bias = gy.sum(axis=(0, 2))
    gcol = _scratch("gcol", (n, k, oh * ow), col.dtype)
    np.matmul(weight.reshape(spec.out_channels, -1).T, gy, out=gcol)
    grad_input = _fold(
        gcol, x.shape, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    )
    return grad_input, grad_weight, grad_bias


def deconv2d(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> np.ndarray:
    """Transposed convolution; weight is (in_ch, out_ch, kh, kw).

    Computed as the adjoint of the mirrored direct convolution, so kernel 4,
    stride 2, padding 1 doubles the spatial size exactly.
    """
    _check_conv_args(x, weight, spec, want_transposed=True)
    n, _, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    x3 = x.reshape(n, spec.in_channels, h * w)
    k = spec.out_channels * spec.kernel_h * spec.kernel_w
    gcol = _scratch("gcol", (n, k, h * w), x.dtype)
    np.matmul(weight.reshape(spec.in_channels, -1).T, x3, out=gcol)
    out = _fold(
        gcol,
        (n, spec.out_channels, oh, ow),
        spec.kernel_h,
        spec.kernel_w,
        spec.stride,
        spec.padding,
    )
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def deconv2d_grad(
    grad_out: np.ndarray,
    x: np.ndarray,
    weight: np.ndarray,
    spec: ConvSpec,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a deconv2d output sum w.r.t. input, weight, and bias."""
    _check_conv_args(x, weight, spec, want_transposed=True)
    n, _, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{(n, spec.out_channels, oh, ow)}"
        )
    col_g = _unfold(grad_out, spec.kernel_h, spec.kernel_w, spec.stride,
                    spec.padding)  # (n, out_ch*kh*kw, h*w)
    grad_input = (weight.reshape(spec.in_channels, -1) @ col_g).reshape(x.shape)
    x3 = x.reshape(n, spec.in_channels, h * w)
    gw_batch = _scratch("gw", (n, spec.in_channels, col_g.shape[1]), col_g.dtype)
    np.matmul(x3, col_g.transpose(0, 2, 1), out=gw_batch)
    grad_weight = gw_batch.sum(axis=0).reshape(weight.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_weight, grad_bias


def xavier_init(shape, fan_in: int, fan_out: int, rng, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform samples on [-a, a] with a = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class ConvLayer:
    """One (de)convolution's parameters; spec.transposed selects the kernel."""

    weight: np.ndarray
    bias: np.ndarray
    spec: ConvSpec


def make_conv_layer(
    c_in: int,
    c_out: int,
    k: int,
    stride: int,
    padding: int,
    rng,
    dtype=DEFAULT_DTYPE,
    transposed: bool = False,
) -> ConvLayer:
    """Xavier-initialized weights, zero bias."""
    fan_in, fan_out = c_in * k * k, c_out * k * k
    shape = (c_in, c_out, k, k) if transposed else (c_out, c_in, k, k)
    weight = xavier_init(shape, fan_in, fan_out, rng, dtype)
    spec = ConvSpec(c_in, c_out, k, k, stride=stride, padding=padding,
                    transposed=transposed)
    return ConvLayer(weight, np.zeros(c_out, dtype=dtype), spec)


def make_linear_layer(d_in: int, d_out: int, rng, dtype=DEFAULT_DTYPE):
    weight = xavier_init((d_in, d_out), d_in, d_out, rng, dtype)
    return LinearLayer(weight, np.zeros(d_out, dtype=dtype))


@dataclass
class LinearLayer:
    weight: np.ndarray  # (in_features, out_features)
    bias: np.ndarray


def layer_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if layer.spec.transposed:
        return deconv2d(x, layer.weight, layer.bias, layer.spec)
    return conv2d(x, layer.weight, layer.bias, layer.spec)


def layer_backward(
    grad_out: np.ndarray, x: np.ndarray, layer: ConvLayer
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if layer.spec.transposed:
        return deconv2d_grad(grad_out, x, layer.weight, layer.spec)
    return conv2d_grad(grad_out, x, layer.weight, layer.spec)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_grad(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient passes where x > 0; a tie at exactly 0 gets gradient 0."""
    return grad_out * (x > 0)


def maxpool2d(
    x: np.ndarray, window: int, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Window maximum with recorded argmax (first occurrence on ties).

    Returns (pooled, argmax) where argmax holds the flat within-window index
    of each maximum, as consumed by maxpool2d_grad.
    """
    _require_nchw(x, "input")
    if window != stride:
        raise ValueError(f"window {window} != stride {stride} is unsupported")
    n, c, h, w = x.shape
    if h % stride != 0:
        raise ValueError(f"height {h} not divisible by stride {stride}")
    if w % stride != 0:
        raise ValueError(f"width {w} not divisible by stride {stride}")
    oh, ow = h // stride, w // stride
    tiles = (
        x.reshape(n, c, oh, window, ow, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, window * window)
    )
    argmax = tiles.argmax(axis=4)
    out = np.take_along_axis(tiles, argmax[..., None], axis=4)[..., 0]
    return out, argmax


def maxpool2d_grad(
    grad_out: np.ndarray,
    argmax: np.ndarray,
    input_shape: tuple[int, int, int, int],
    window: int,
    stride: int,
) -> np.ndarray:
    """Route upstream gradient to each window's recorded argmax position."""
    if window != stride:
        raise ValueError(f"window {window} != stride {stride} is unsupported")
    n, c, h, w = input_shape
    oh, ow = h // stride, w // stride
    tiles = np.zeros((n, c, oh, ow, window * window), dtype=grad_out.dtype)
    np.put_along_axis(tiles, argmax[..., None], grad_out[..., None], axis=4)
    return (
        tiles.reshape(n, c, oh, ow, window, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the spatial dims: (N,C,H,W) -> (N,C)."""
    _require_nchw(x, "input")
    return x.mean(axis=(2, 3))


def global_avg_pool_grad(
    grad_out: np.ndarray, input_shape: tuple[int, int, int, int]
) -> np.ndarray:
    n, c, h, w = input_shape
    return np.broadcast_to(
        grad_out[:, :, None, None] / (h * w), input_shape
    ).astype(grad_out.dtype, copy=True)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map of row vectors: (N, in) @ (in, out) + bias."""
    if x.ndim != 2:
        raise ValueError(f"input must be 2-D (rows, features), got {x.ndim}-D")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"input features {x.shape[1]} != weight rows {weight.shape[0]}"
        )
    return x @ weight + bias


def linear_grad(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad_out.shape != (x.shape[0], weight.shape[1]):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"{(x.shape[0], weight.shape[1])}"
        )
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def softmax_cross_entropy(
    scores: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of `labels` under a softmax over scores.

    Uses max-subtraction for stability.  Returns (loss, d loss / d scores)
    where the gradient is (softmax - onehot) / batch.
    """
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D (rows, classes), got {scores.ndim}-D")
    n, c = scores.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    shifted = scores - scores.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(scores.dtype, copy=False)


def grad_check(
    fn,
    inputs: list[np.ndarray],
    epsilon: float = 1e-5,
    max_probes: int | None = None,
    seed: int = 0,
) -> float:
    """Compare fn's analytic gradients against central finite differences.

    `fn(*inputs)` must return (scalar, grads) with one gradient array per
    input.  Every element is probed unless `max_probes` caps the number of
    sampled coordinates per input (for large parameter tensors).  Returns the
    worst relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    _, grads = fn(*inputs)
    if len(grads) != len(inputs):
        raise ValueError(f"fn returned {len(grads)} gradients for {len(inputs)} inputs")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pos, (x, g) in enumerate(zip(inputs, grads)):
        if g.shape != x.shape:
            raise ValueError(
                f"gradient {pos} shape {g.shape} does not match input {x.shape}"
            )
        idxs = np.arange(x.size)
        if max_probes is not None and x.size > max_probes:
            idxs = rng.choice(x.size, size=max_probes, replace=False)
        for idx in idxs:
            orig = x.flat[idx]
            x.flat[idx] = orig + epsilon
            x_plus = float(x.flat[idx])
            f_plus = fn(*inputs)[0]
            x.flat[idx] = orig - epsilon
            x_minus = float(x.flat[idx])
            f_minus = fn(*inputs)[0]
            x.flat[idx] = orig
            # divide by the step actually applied after dtype rounding
            numeric = (f_plus - f_minus) / (x_plus - x_minus)
            analytic = g.flat[idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
