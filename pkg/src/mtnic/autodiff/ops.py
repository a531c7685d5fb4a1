"""Differentiable layer operations over NHWC tensors.

Every operation returns a :class:`Tensor` whose backward rule is recorded
only when an input requires a gradient. Matrix products are evaluated as
stacked per-sample products so that a sample's output never depends on the
other samples in its batch; compression relies on this to be bit-exact
across batch layouts and worker counts.
"""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from .tensor import Tensor, as_tensor

PROB_FLOOR = 1e-12


def _out_and_pads(size: int, k: int, stride: int, padding: str) -> Tuple[int, int, int]:
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ValueError(f"valid convolution needs extent >= {k}, got {size}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    return _out_and_pads(size, k, stride, padding)[0]


def _geometry(x_shape, kh, kw, stride, padding):
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    _, h, w, _ = x_shape
    ho, pt, pb = _out_and_pads(h, kh, stride, padding)
    wo, pl, pr = _out_and_pads(w, kw, stride, padding)
    return ho, wo, ((0, 0), (pt, pb), (pl, pr), (0, 0))


def _taps(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    for di in range(kh):
        for dj in range(kw):
            yield di, dj, xp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :]


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor], stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation. ``x`` is [N,H,W,Cin], ``kernel`` is [kh,kw,Cin,Cout]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects a rank-4 input and kernel")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if bias is not None and as_tensor(bias).shape != (cout,):
        raise ValueError(f"bias must have shape ({cout},)")
    n, h, w, _ = x.shape
    ho, wo, pads = _geometry(x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, pads)
    cols = np.stack([t for _, _, t in _taps(xp, kh, kw, stride, ho, wo)], axis=3)
    cols = cols.reshape(n, ho * wo, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = np.matmul(cols, wmat).reshape(n, ho, wo, cout)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        g2 = g.reshape(n, ho * wo, cout)
        dk = (cols.reshape(-1, cols.shape[-1]).T @ g2.reshape(-1, cout)).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(g2, wmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros(xp.shape)
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] += dcols[:, :, :, di, dj, :]
            dx = dxp[:, pads[1][0] : pads[1][0] + h, pads[2][0] : pads[2][0] + w, :]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return Tensor.from_op(out, parents, back, "conv2d")


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel spatial convolution. ``kernel`` is [kh,kw,C]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 3:
        raise ValueError("depthwise_conv2d expects a rank-4 input and rank-3 kernel")
    kh, kw, c = kernel.shape
    if x.shape[3] != c:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {c}")
    n, h, w, _ = x.shape
    ho, wo, pads = _geometry(x.shape, kh, kw, stride, padding)
    xp = np.pad(x.data, pads)
    out = np.zeros((n, ho, wo, c))
    for di, dj, tap in _taps(xp, kh, kw, stride, ho, wo):
        out += tap * kernel.data[di, dj]

    def back(g):
        dk = np.empty(kernel.shape) if kernel.requires_grad else None
        dxp = np.zeros(xp.shape) if x.requires_grad else None
        for di, dj, tap in _taps(xp, kh, kw, stride, ho, wo):
            if dk is not None:
                dk[di, dj] = (g * tap).sum(axis=(0, 1, 2))
            if dxp is not None:
                dxp[:, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride, :] += g * kernel.data[di, dj]
        dx = None if dxp is None else dxp[:, pads[1][0] : pads[1][0] + h, pads[2][0] : pads[2][0] + w, :]
        return dx, dk

    return Tensor.from_op(out, (x, kernel), back, "depthwise_conv2d")


def pointwise_conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor]) -> Tensor:
    """1x1 channel-mixing convolution, ``kernel`` of shape [1,1,Cin,Cout]."""
    return conv2d(x, kernel, bias, stride=1, padding="valid")


def depthwise_separable_conv2d(
    x: Tensor, depth_kernel: Tensor, point_kernel: Tensor, bias: Optional[Tensor], stride: int = 1, padding: str = "same"
) -> Tensor:
    return pointwise_conv2d(depthwise_conv2d(x, depth_kernel, stride, padding), point_kernel, bias)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-3,
) -> Tensor:
    """Normalize over every axis but the last (channels).

    In ``train`` mode the batch statistics are used and the running buffers
    are updated in place as ``r <- momentum * r + (1 - momentum) * batch``.
    ``infer`` mode reads the running buffers only.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        m = x.size // x.shape[-1]
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv
        out = gamma.data * xhat + beta.data

        def back(g):
            dxhat = g * gamma.data
            dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    elif mode == "infer":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv
        out = gamma.data * xhat + beta.data

        def back(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        raise ValueError(f"unknown mode {mode!r}")
    return Tensor.from_op(out, (x, gamma, beta), back, "batch_norm")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    return Tensor.from_op(np.where(pos, x.data, alpha * x.data), (x,), lambda g: (np.where(pos, g, alpha * g),), "leaky_relu")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    """Affine map [N,Din] @ [Din,Dout] + bias."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: cannot map input {x.shape} with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = np.matmul(xd[:, None, :], wd)[:, 0, :]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def back(g):
        grads = [g @ wd.T if x.requires_grad else None, xd.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, back, "dense")


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = z / z.sum(axis=1, keepdims=True)
    return Tensor.from_op(p, (x,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),), "softmax")


def dropout(
    x: Tensor, rate: float, mode: str = "train", granularity: str = "element", rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout; the identity in ``infer`` mode or at rate 0.

    ``channel`` granularity drops whole feature maps of a [N,H,W,C] input.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    x = as_tensor(x)
    if granularity == "channel":
        mask_shape = (x.shape[0],) + (1,) * (x.ndim - 2) + (x.shape[-1],)
    elif granularity == "element":
        mask_shape = x.shape
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    mask = (rng.random(mask_shape) >= rate) * (1.0 / (1.0 - rate))
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log probs[i, labels[i]]`` with probabilities floored at 1e-12."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -np.log(clamped).mean()

    def back(g):
        d = np.zeros(probs.shape)
        d[rows, labels] = np.where(picked > PROB_FLOOR, -1.0 / (n * clamped), 0.0)
        return (d * g,)

    return Tensor.from_op(np.array(loss), (probs,), back, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return Tensor.from_op(np.array((diff**2).mean()), (pred, target), lambda g: (2 * g * diff / n, -2 * g * diff / n), "mse")


def sum_of_squares(tensors) -> Tensor:
    """Sum of squared entries over a collection of tensors (L2 penalty core)."""
    tensors = list(tensors)
    total = math.fsum(float(np.sum(t.data * t.data)) for t in tensors)
    return Tensor.from_op(np.array(total), tensors, lambda g: tuple(2 * g * t.data for t in tensors), "sum_of_squares")


def spatial_mean(x: Tensor) -> Tensor:
    """Average a [N,H,W,C] tensor over its spatial axes to [N,C]."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    return Tensor.from_op(
        x.data.mean(axis=(1, 2)), (x,), lambda g: (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),), "spatial_mean"
    )
