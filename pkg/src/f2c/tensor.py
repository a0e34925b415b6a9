"""Dense layer math with hand-written forward and backward passes.

Tensors are plain float64 numpy arrays. Every spatial op accepts either a
single sample ``(C, H, W)`` or a batch ``(N, C, H, W)``; dense and the loss
accept ``(D,)`` or ``(N, D)``. The batched forms are what the training loop
uses, the single-sample forms are what the tests and the occlusion probe use.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes do not fit the op's contract."""


@dataclass
class LayerGrad:
    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _batched4(x: np.ndarray, name: str) -> Tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{name}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _check_conv(x4, kernels, bias, stride, pad):
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0 (stride={stride}, pad={pad})")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be (C_out,C_in,kH,kW), got {kernels.shape}")
    c_out, c_in, kh, kw = kernels.shape
    if x4.shape[1] != c_in:
        raise ShapeError(
            f"conv2d: input has {x4.shape[1]} channels but kernels expect {c_in} "
            f"(input {x4.shape}, kernels {kernels.shape})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")
    h, w = x4.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def im2col_cm(xcm: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch matrix ``(kh*kw*C, N*Ho*Wo)`` from a channel-major ``(C, N, H, W)`` input.

    Rows are ordered (i, j, c) so each kernel offset fills one contiguous block.
    """
    c, n, h, w = xcm.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = _pad(xcm, pad)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=xcm.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(kh * kw * c, n * ho * wo)


def _kernel_matrix(kernels: np.ndarray) -> np.ndarray:
    # (O, C, kh, kw) -> (O, kh*kw*C) matching the im2col row order
    return kernels.transpose(0, 2, 3, 1).reshape(kernels.shape[0], -1)


def conv2d_cm(xcm, kernels, bias, stride, pad):
    """Channel-major conv: ``(C, N, H, W) -> (O, N, Ho, Wo)``; also returns the patch matrix."""
    _, n, h, w = xcm.shape
    c_out, _, kh, kw = kernels.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = im2col_cm(xcm, kh, kw, stride, pad)
    out = _kernel_matrix(kernels) @ cols
    out += bias[:, None]
    return out.reshape(c_out, n, ho, wo), cols


def conv2d_cm_backward(in_shape, kernels, up_cm, stride, pad, cols, need_input_grad=True):
    c_in, n, h, w = in_shape
    c_out, _, kh, kw = kernels.shape
    ho, wo = up_cm.shape[2:]
    up_c = up_cm.reshape(c_out, -1)
    grad_k = (up_c @ cols.T).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
    grad_b = up_c.sum(axis=1)
    grad_x = None
    if need_input_grad:
        dcols = (_kernel_matrix(kernels).T @ up_c).reshape(kh, kw, c_in, n, ho, wo)
        grad_xp = np.zeros((c_in, n, h + 2 * pad, w + 2 * pad), dtype=up_cm.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
        grad_x = grad_xp[:, :, pad:pad + h, pad:pad + w] if pad else grad_xp
    return LayerGrad(input_grad=grad_x, param_grads={"weight": np.ascontiguousarray(grad_k), "bias": grad_b})


def conv2d(input, kernels, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding.

    ``out[o, y, x] = bias[o] + sum_{c,i,j} in[c, y*stride+i-pad, x*stride+j-pad] * k[o, c, i, j]``
    """
    x4, single = _batched4(as_tensor(input), "conv2d")
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    _check_conv(x4, kernels, bias, stride, pad)
    out, _ = conv2d_cm(x4.transpose(1, 0, 2, 3), kernels, bias, stride, pad)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    return out[0] if single else out


def conv2d_backward(input, kernels, upstream_grad, stride: int = 1, pad: int = 0) -> LayerGrad:
    """Gradients of ``conv2d`` w.r.t. input, kernels and bias."""
    x4, single = _batched4(as_tensor(input), "conv2d_backward")
    kernels = as_tensor(kernels)
    up = as_tensor(upstream_grad)
    if single:
        up = up[None]
    _check_conv(x4, kernels, None, stride, pad)
    n, c_in, h, w = x4.shape
    c_out, _, kh, kw = kernels.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if up.shape != (n, c_out, ho, wo):
        raise ShapeError(f"conv2d_backward: upstream shape {up.shape[int(single):]} != output shape {(c_out, ho, wo)}")
    xcm = x4.transpose(1, 0, 2, 3)
    cols = im2col_cm(xcm, kh, kw, stride, pad)
    lg = conv2d_cm_backward(xcm.shape, kernels, np.ascontiguousarray(up.transpose(1, 0, 2, 3)), stride, pad, cols)
    grad_x = np.ascontiguousarray(lg.input_grad.transpose(1, 0, 2, 3))
    lg.input_grad = grad_x[0] if single else grad_x
    return lg


def relu(input) -> np.ndarray:
    return np.maximum(as_tensor(input), 0.0)


def relu_backward(input, upstream) -> np.ndarray:
    input = as_tensor(input)
    return np.where(input > 0, as_tensor(upstream), 0.0)


def _pool_blocks(x, window):
    """Max and first-argmax over non-overlapping windows of the last two axes."""
    h, w = x.shape[-2:]
    ho, wo = h // window, w // window
    if window == 2:
        # pairwise: columns first, then rows, strict compares keep row-major first-index ties
        xh = x[..., :ho * 2, :wo * 2].reshape(x.shape[:-2] + (ho * 2, wo, 2))
        left, right = xh[..., 0], xh[..., 1]
        hsel = right > left
        hmax = np.maximum(left, right).reshape(x.shape[:-2] + (ho, 2, wo))
        hsel = hsel.reshape(hmax.shape)
        top, bottom = hmax[..., 0, :], hmax[..., 1, :]
        vsel = bottom > top
        arg = 2 * vsel + np.where(vsel, hsel[..., 1, :], hsel[..., 0, :])
        return np.maximum(top, bottom), arg
    best = x[..., 0:ho * window:window, 0:wo * window:window].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    for t in range(1, window * window):
        i, j = divmod(t, window)
        cand = x[..., i:i + ho * window:window, j:j + wo * window:window]
        upd = cand > best  # strict: earlier offsets win ties
        np.copyto(best, cand, where=upd)
        arg[upd] = t
    return best, arg


def _unpool_blocks(up, arg, shape, window):
    """Scatter ``up`` to the argmax cell of each window (inverse of ``_pool_blocks``)."""
    ho, wo = up.shape[-2:]
    h, w = shape[-2:]
    lead = int(np.prod(shape[:-2]))
    base = (
        np.arange(lead)[:, None, None] * (h * w)
        + (np.arange(ho) * (window * w))[None, :, None]
        + (np.arange(wo) * window)[None, None, :]
    )
    arg = arg.reshape(lead, ho, wo)
    flat = np.zeros(lead * h * w, dtype=up.dtype)
    flat[(base + (arg // window) * w + arg % window).ravel()] = up.ravel()
    return flat.reshape(shape)


def maxpool2d(input, window: int, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Max over ``window x window`` patches.

    Returns the pooled tensor and, per output cell, the flat (row-major)
    offset of the winning element inside its window. Ties go to the first
    element in scan order.
    """
    x4, single = _batched4(as_tensor(input), "maxpool2d")
    if window < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: window and stride must be >= 1 (window={window}, stride={stride})")
    n, c, h, w = x4.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    if window == stride:
        out, argmax = _pool_blocks(x4, window)
    else:
        ho = (h - window) // stride + 1
        wo = (w - window) // stride + 1
        windows = sliding_window_view(x4, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = windows.reshape(n, c, ho, wo, window * window)
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool2d_backward(upstream, argmax, input_shape, window: int, stride: int) -> np.ndarray:
    up = as_tensor(upstream)
    argmax = np.asarray(argmax)
    single = len(input_shape) == 3
    if single:
        up, argmax = up[None], argmax[None]
        input_shape = (1,) + tuple(input_shape)
    if up.shape != argmax.shape:
        raise ShapeError(f"maxpool2d_backward: upstream {up.shape} and argmax {argmax.shape} differ")
    n, c, h, w = input_shape
    if window == stride:
        grad = _unpool_blocks(up, argmax, (n, c, h, w), window)
    else:
        ho, wo = up.shape[2:]
        grad = np.zeros((n, c, h, w))
        rows = np.arange(ho)[:, None] * stride + argmax // window
        cols = np.arange(wo)[None, :] * stride + argmax % window
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(grad, (nn, cc, rows, cols), up)
    return grad[0] if single else grad


def dense(input, weights, bias) -> np.ndarray:
    x = as_tensor(input)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1] or bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weights {weights.shape}, bias {bias.shape} are inconsistent")
    return x @ weights.T + bias


def dense_backward(input, weights, upstream) -> LayerGrad:
    x = as_tensor(input)
    weights = as_tensor(weights)
    up = as_tensor(upstream)
    if up.shape != x.shape[:-1] + (weights.shape[0],):
        raise ShapeError(f"dense_backward: upstream {up.shape} does not match output of input {x.shape}")
    if x.ndim == 1:
        grad_w = np.outer(up, x)
        grad_b = up.copy()
    else:
        grad_w = up.T @ x
        grad_b = up.sum(axis=0)
    return LayerGrad(input_grad=up @ weights, param_grads={"weight": grad_w, "bias": grad_b})


def softmax(logits) -> np.ndarray:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label) -> Tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against an integer label.

    For a batch ``(N, K)`` with ``N`` labels the loss is the batch mean and the
    gradient is scaled by ``1/N`` accordingly.
    """
    z = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label))
    k = z.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_xent: label {label} out of range for {k} classes")
    z2 = z.reshape(-1, k)
    if labels.shape[0] != z2.shape[0]:
        raise ShapeError(f"softmax_xent: {z2.shape[0]} logit rows but {labels.shape[0]} labels")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z2.shape[0])
    losses = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    n = z2.shape[0]
    if z.ndim == 1:
        return float(max(losses[0], 0.0)), grad[0]
    return float(np.maximum(losses, 0.0).mean()), grad / n


def dropout(input, p: float, training: bool, rng: Optional[np.random.Generator] = None):
    """Inverted dropout. Returns ``(output, mask)``; mask already carries the 1/(1-p) scale."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(input)
    if not training or p == 0.0:
        return x.copy(), np.ones_like(x)
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(upstream, mask) -> np.ndarray:
    return as_tensor(upstream) * mask


def finite_diff_grad(f: Callable[[np.ndarray], float], at, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(at).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
