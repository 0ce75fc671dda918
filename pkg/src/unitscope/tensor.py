"""Dense float32 tensors and the forward/backward kernels built on them.

Every kernel is a pure function. Convolution accumulates per output element
in (channel, ky, kx) order so results are reproducible bit-for-bit across
runs; the heavy loops are compiled with numba. Batched ndarray variants
(leading N axis, underscore-prefixed) back the public single-sample API and
are what the trainer calls directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ShapeError, ValidationError


class Tensor:
    """Dense n-dimensional float32 array, row-major, all values finite."""

    __slots__ = ("data",)

    def __init__(self, data, shape=None):
        arr = np.asarray(data, dtype=np.float32)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if any(s <= 0 for s in shape):
                raise ShapeError(f"non-positive dimension in shape {shape}")
            if arr.size != int(np.prod(shape)):
                raise ShapeError(
                    f"data has {arr.size} elements, shape {shape} needs {int(np.prod(shape))}"
                )
            arr = arr.reshape(shape)
        if arr.size == 0:
            raise ShapeError("empty tensor")
        if not np.isfinite(arr).all():
            raise ValidationError("tensor rejected: contains NaN or Inf")
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float32))


@dataclass(frozen=True)
class ConvSpec:
    """Hyperparameters of a 2-D cross-correlation layer."""

    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValidationError(f"kernel dims must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValidationError(f"padding must be >= 0, got {self.padding}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("channel counts must be >= 1")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output would be {oh}x{ow} for input {h}x{w} "
                f"(kernel {self.kernel_h}x{self.kernel_w}, stride {self.stride}, pad {self.padding})"
            )
        return oh, ow


# ---------------------------------------------------------------------------
# numba conv kernels. The forward kernel keeps the contractual (ci, ky, kx)
# accumulation order per output element; the backward kernels only need
# run-to-run determinism, so reassociation is allowed for vectorization.
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv_fwd_kernel(xp, w, b, stride, out):
    n_samples, _, _, _ = xp.shape
    c_out, c_in, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    for n in range(n_samples):
        for co in range(c_out):
            for i in range(oh):
                row = out[n, co, i]
                bias = b[co]
                for j in range(ow):
                    row[j] = bias
                ii = i * stride
                for ci in range(c_in):
                    for ky in range(kh):
                        src = xp[n, ci, ii + ky]
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            if stride == 1:
                                for j in range(ow):
                                    row[j] += wv * src[j + kx]
                            else:
                                for j in range(ow):
                                    row[j] += wv * src[j * stride + kx]
    return out


@njit(cache=True, fastmath={"reassoc", "contract", "nsz"})
def _conv_bwd_input_kernel(g, w, stride, gxp):
    n_samples, c_out, oh, ow = g.shape
    _, c_in, kh, kw = w.shape
    for n in range(n_samples):
        for co in range(c_out):
            for i in range(oh):
                grow = g[n, co, i]
                ii = i * stride
                for ci in range(c_in):
                    for ky in range(kh):
                        dst = gxp[n, ci, ii + ky]
                        for kx in range(kw):
                            wv = w[co, ci, ky, kx]
                            if stride == 1:
                                for j in range(ow):
                                    dst[j + kx] += wv * grow[j]
                            else:
                                for j in range(ow):
                                    dst[j * stride + kx] += wv * grow[j]
    return gxp


@njit(cache=True, fastmath={"reassoc", "contract", "nsz"})
def _conv_bwd_weights_kernel(g, xp, stride, gw, gb):
    n_samples, c_out, oh, ow = g.shape
    _, c_in, kh, kw = gw.shape
    zero = g[0, 0, 0, 0] * 0
    for n in range(n_samples):
        for co in range(c_out):
            for i in range(oh):
                grow = g[n, co, i]
                acc_b = zero
                for j in range(ow):
                    acc_b += grow[j]
                gb[co] += acc_b
                ii = i * stride
                for ci in range(c_in):
                    for ky in range(kh):
                        src = xp[n, ci, ii + ky]
                        for kx in range(kw):
                            acc = zero
                            if stride == 1:
                                for j in range(ow):
                                    acc += grow[j] * src[j + kx]
                            else:
                                for j in range(ow):
                                    acc += grow[j] * src[j * stride + kx]
                            gw[co, ci, ky, kx] += acc
    return gw, gb


@njit(cache=True, fastmath={"reassoc", "contract", "nsz"})
def _conv_bwd_weights3_kernel(g, xp, gw, gb):
    # kh == kw == 3, stride == 1: sliding 3-accumulator reductions
    n_samples, c_out, oh, ow = g.shape
    _, c_in, _, _ = gw.shape
    zero = g[0, 0, 0, 0] * 0
    for n in range(n_samples):
        for co in range(c_out):
            for i in range(oh):
                grow = g[n, co, i]
                acc_b = zero
                for j in range(ow):
                    acc_b += grow[j]
                gb[co] += acc_b
                for ci in range(c_in):
                    for ky in range(3):
                        src = xp[n, ci, i + ky]
                        a0 = zero
                        a1 = zero
                        a2 = zero
                        for j in range(ow):
                            gj = grow[j]
                            a0 += gj * src[j]
                            a1 += gj * src[j + 1]
                            a2 += gj * src[j + 2]
                        gw[co, ci, ky, 0] += a0
                        gw[co, ci, ky, 1] += a1
                        gw[co, ci, ky, 2] += a2
    return gw, gb


@njit(cache=True)
def _maxpool2_kernel(x, out, idx):
    n_samples, c, h2, w2 = out.shape
    for n in range(n_samples):
        for ci in range(c):
            for i in range(h2):
                r0 = x[n, ci, 2 * i]
                r1 = x[n, ci, 2 * i + 1]
                for j in range(w2):
                    jj = 2 * j
                    best = r0[jj]
                    k = 0
                    if r0[jj + 1] > best:
                        best = r0[jj + 1]
                        k = 1
                    if r1[jj] > best:
                        best = r1[jj]
                        k = 2
                    if r1[jj + 1] > best:
                        best = r1[jj + 1]
                        k = 3
                    out[n, ci, i, j] = best
                    idx[n, ci, i, j] = k


@njit(cache=True)
def _maxpool2_grad_kernel(g, idx, gx):
    n_samples, c, h2, w2 = g.shape
    for n in range(n_samples):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = idx[n, ci, i, j]
                    gx[n, ci, 2 * i + (k >> 1), 2 * j + (k & 1)] = g[n, ci, i, j]


@njit(cache=True)
def _maxpool2_relu_grad_kernel(g, idx, relu_out, gx):
    # fused backward through maxpool2 then relu; relu_out > 0 iff pre-activation > 0
    n_samples, c, h2, w2 = g.shape
    for n in range(n_samples):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = idx[n, ci, i, j]
                    y = 2 * i + (k >> 1)
                    x = 2 * j + (k & 1)
                    if relu_out[n, ci, y, x] > 0:
                        gx[n, ci, y, x] = g[n, ci, i, j]


def _pad2d(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


def _conv2d_batch(x, w, b, stride, pad):
    n, _, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = _pad2d(x, pad)
    out = np.empty((n, c_out, oh, ow), dtype=x.dtype)
    _conv_fwd_kernel(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), stride, out)
    return out


def _conv2d_backward_batch(g, x, w, stride, pad, need_grad_input=True):
    n, c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = _pad2d(x, pad)
    g = np.ascontiguousarray(g)
    w = np.ascontiguousarray(w)

    gx = None
    if need_grad_input:
        if stride == 1 and kh == kw and kh - 1 - pad >= 0:
            # grad wrt input is itself a stride-1 conv of g with flipped,
            # channel-transposed weights (reuses the fast forward kernel)
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gp = _pad2d(g, kh - 1 - pad)
            gx = np.empty((n, c_in, h, wd), dtype=x.dtype)
            _conv_fwd_kernel(gp, wf, np.zeros(c_in, dtype=x.dtype), 1, gx)
        else:
            gxp = np.zeros_like(xp)
            _conv_bwd_input_kernel(g, w, stride, gxp)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd].copy() if pad else gxp

    gw = np.zeros_like(w)
    gb = np.zeros(c_out, dtype=w.dtype)
    if kh == 3 and kw == 3 and stride == 1:
        _conv_bwd_weights3_kernel(g, xp, gw, gb)
    else:
        _conv_bwd_weights_kernel(g, xp, stride, gw, gb)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# elementwise / pooling / linear kernels (numpy is fast enough here)
# ---------------------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0)


def _relu_grad(g, x):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, g, 0).astype(g.dtype)


def _maxpool2_batch(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    x = np.ascontiguousarray(x)
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    _maxpool2_kernel(x, out, idx)
    return out, idx


def _maxpool2_grad_batch(g, idx):
    n, c, h2, w2 = g.shape
    gx = np.zeros((n, c, h2 * 2, w2 * 2), dtype=g.dtype)
    _maxpool2_grad_kernel(np.ascontiguousarray(g), idx, gx)
    return gx


def _maxpool2_relu_grad_batch(g, idx, relu_out):
    n, c, h2, w2 = g.shape
    gx = np.zeros((n, c, h2 * 2, w2 * 2), dtype=g.dtype)
    _maxpool2_relu_grad_kernel(np.ascontiguousarray(g), idx, relu_out, gx)
    return gx


def _global_avgpool_batch(x):
    return x.mean(axis=(2, 3))


def _global_avgpool_grad_batch(g, h, w):
    n, c = g.shape
    scale = g.dtype.type(1.0) / g.dtype.type(h * w)
    return np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).copy()


def _fc_batch(x, w, b):
    return x @ w.T + b


def _fc_backward_batch(g, x, w):
    gx = g @ w
    gw = g.T @ x
    gb = g.sum(axis=0)
    return gx, gw, gb


def _softmax_xent_batch(logits, labels):
    """Stable 2-class cross entropy; returns per-sample losses and per-sample grads."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    losses = lse - logits[np.arange(len(labels)), labels]
    grad = p.copy()
    grad[np.arange(len(labels)), labels] -= 1
    return losses, grad


def _batchnorm_inference_batch(x, mean, var, gamma, beta, eps):
    scale = gamma / np.sqrt(var + eps)
    shift = beta - mean * scale
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _batchnorm_grad_input_batch(g, var, gamma, eps):
    # statistics and affine params are frozen (inference mode only)
    scale = gamma / np.sqrt(var + eps)
    return g * scale[None, :, None, None]


def _bilinear_resize(src, out_h, out_w):
    """Align-corners bilinear resize over the last two axes."""
    h, w = src.shape[-2], src.shape[-1]
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(src.dtype)
    wx = (xs - x0).astype(src.dtype)
    tl = src[..., y0[:, None], x0[None, :]]
    tr = src[..., y0[:, None], x1[None, :]]
    bl = src[..., y1[:, None], x0[None, :]]
    br = src[..., y1[:, None], x1[None, :]]
    top = tl + (tr - tl) * wx[None, :]
    bot = bl + (br - bl) * wx[None, :]
    return top + (bot - top) * wy[:, None]


# ---------------------------------------------------------------------------
# public single-sample API
# ---------------------------------------------------------------------------

def _check_conv_shapes(x, w, b, spec: ConvSpec):
    if x.ndim != 3:
        raise ShapeError(f"conv input must be [C,H,W], got {x.shape}")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"in_channels: input has {x.shape[0]}, spec declares {spec.in_channels}")
    if tuple(w.shape) != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"weights: expected {(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)}, "
            f"got {tuple(w.shape)}"
        )
    if tuple(b.shape) != (spec.out_channels,):
        raise ShapeError(f"bias: expected ({spec.out_channels},), got {tuple(b.shape)}")
    return spec.output_hw(x.shape[1], x.shape[2])


def conv2d_forward(x: Tensor, weights: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation plus bias; output [out_channels, H', W']."""
    _check_conv_shapes(x.data, weights.data, bias.data, spec)
    out = _conv2d_batch(x.data[None], weights.data, bias.data, spec.stride, spec.padding)
    return Tensor(out[0])


def conv2d_backward(grad_out: Tensor, x: Tensor, weights: Tensor, spec: ConvSpec):
    """Gradients of sum(grad_out * conv2d_forward(x)) w.r.t. input, weights, bias."""
    oh, ow = _check_conv_shapes(x.data, weights.data, np.zeros(spec.out_channels), spec)
    if tuple(grad_out.shape) != (spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out: expected {(spec.out_channels, oh, ow)}, got {grad_out.shape}")
    gx, gw, gb = _conv2d_backward_batch(
        grad_out.data[None], x.data[None], weights.data, spec.stride, spec.padding
    )
    return Tensor(gx[0]), Tensor(gw), Tensor(gb)


def relu(x: Tensor) -> Tensor:
    return Tensor(_relu(x.data))


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} != input shape {x.shape}")
    return Tensor(_relu_grad(grad_out.data, x.data))


def maxpool2(x: Tensor):
    """2x2 non-overlapping max; returns (pooled, argmax index map)."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2 input must be [C,H,W], got {x.shape}")
    out, idx = _maxpool2_batch(x.data[None])
    return Tensor(out[0]), idx[0]


def maxpool2_backward(grad_out: Tensor, argmax_index_map) -> Tensor:
    if tuple(grad_out.shape) != tuple(argmax_index_map.shape):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != argmax map shape {argmax_index_map.shape}"
        )
    return Tensor(_maxpool2_grad_batch(grad_out.data[None], argmax_index_map[None])[0])


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"fc input must be a vector, got {x.shape}")
    m, n = weights.shape
    if x.shape[0] != n:
        raise ShapeError(f"fc input length {x.shape[0]} != weight columns {n}")
    if bias.shape != (m,):
        raise ShapeError(f"fc bias length {bias.shape[0]} != weight rows {m}")
    return Tensor(_fc_batch(x.data[None], weights.data, bias.data)[0])


def fc_backward(grad_out: Tensor, x: Tensor, weights: Tensor):
    m, n = weights.shape
    if grad_out.shape != (m,):
        raise ShapeError(f"fc grad length {grad_out.shape} != output length ({m},)")
    gx, gw, gb = _fc_backward_batch(grad_out.data[None], x.data[None], weights.data)
    return Tensor(gx[0]), Tensor(gw), Tensor(gb)


def global_avgpool(x: Tensor) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"global_avgpool input must be [C,H,W], got {x.shape}")
    return Tensor(_global_avgpool_batch(x.data[None])[0])


def global_avgpool_backward(grad_out: Tensor, h: int, w: int) -> Tensor:
    return Tensor(_global_avgpool_grad_batch(grad_out.data[None], h, w)[0])


def softmax_xent(logits: Tensor, label: int):
    """Binary cross entropy over two logits; returns (loss, grad_logits)."""
    if logits.shape != (2,):
        raise ShapeError(f"softmax_xent expects two logits, got shape {logits.shape}")
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    losses, grad = _softmax_xent_batch(logits.data[None].astype(np.float64), np.array([label]))
    return float(losses[0]), Tensor(grad[0])


def bilinear_upsample(map2d: Tensor, out_h: int, out_w: int) -> Tensor:
    if map2d.data.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects [H,W], got {map2d.shape}")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"output dims must be >= 1, got {out_h}x{out_w}")
    return Tensor(_bilinear_resize(map2d.data, out_h, out_w))


def batchnorm_inference(x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor, beta: Tensor,
                        eps: float) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeError(f"batchnorm input must be [C,H,W], got {x.shape}")
    c = x.shape[0]
    for name, t in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm {name} must have length {c}, got {t.shape}")
    if (var.data < 0).any():
        raise ValidationError("batchnorm variance must be >= 0")
    out = _batchnorm_inference_batch(x.data[None], mean.data, var.data, gamma.data, beta.data, eps)
    return Tensor(out[0])
