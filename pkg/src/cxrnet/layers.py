"""Neural-network layers over NCHW tensors: conv, pooling, dense, batchnorm, dropout,
activations, global average pooling.

Convolution ships in two forms: ``conv2d_naive``, a six-loop reference used only as a
test oracle, and ``conv2d``, the im2col+matmul fast path used by models.  Both follow
the same padding arithmetic ('valid' shrinks, 'same' pads to ceil(in/stride) with the
extra row/column on the bottom/right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, is_grad_enabled as _recording


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(in_size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "valid":
        if in_size < kernel:
            raise ValueError(f"kernel {kernel} larger than input extent {in_size} with 'valid' padding")
        return (in_size - kernel) // stride + 1
    if padding == "same":
        return -(-in_size // stride)
    raise ValueError(f"unknown padding {padding!r}, expected 'valid' or 'same'")


def _same_pad(in_size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-in_size // stride)
    total = max((out - 1) * stride + kernel - in_size, 0)
    beg = total // 2
    return beg, total - beg


@dataclass
class ConvParams:
    """One convolution layer's static configuration plus its learnable tensors."""

    filters: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: str
    weights: Tensor  # [filters, in_ch, kh, kw]
    bias: Tensor  # [filters]

    @staticmethod
    def create(filters: int, kernel, in_channels: int, stride=1, padding: str = "valid",
               rng: np.random.Generator | None = None, init: str = "kaiming") -> "ConvParams":
        kh, kw = _pair(kernel)
        fan_in = in_channels * kh * kw
        fan_out = filters * kh * kw
        if init == "kaiming":
            w = kaiming_uniform((filters, in_channels, kh, kw), fan_in, rng)
        else:
            w = glorot_uniform((filters, in_channels, kh, kw), fan_in, fan_out, rng)
        return ConvParams(
            filters=filters,
            kernel=(kh, kw),
            stride=_pair(stride),
            padding=padding,
            weights=Tensor(w, requires_grad=True),
            bias=Tensor(np.zeros(filters, dtype=w.dtype), requires_grad=True),
        )


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator | None = None,
                    dtype=np.float32) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator | None = None,
                   dtype=np.float32) -> np.ndarray:
    rng = rng if rng is not None else np.random.default_rng()
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---- convolution -----------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    """Patch matrix [N*oh*ow, C*kh*kw] from a padded NCHW array."""
    n, c, _, _ = xp.shape
    sn, sc, srow, scol = xp.strides
    windows = as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(sn, srow * sh, scol * sw, sc, srow, scol),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, c * kh * kw)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation of an NCHW batch with p.weights, plus channel bias."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    f, c_w, kh, kw = p.weights.shape
    if c != c_w:
        raise ValueError(f"input has {c} channels but weights expect {c_w}")
    sh, sw = p.stride
    oh = conv_output_size(h, kh, sh, p.padding)
    ow = conv_output_size(w, kw, sw, p.padding)
    if p.padding == "same":
        (pt, pb), (pl, pr) = _same_pad(h, kh, sh), _same_pad(w, kw, sw)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))

    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    w2 = p.weights.data.reshape(f, -1).T  # [C*kh*kw, F]
    out2 = cols @ w2 + p.bias.data
    out = Tensor(out2.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    weights, bias = p.weights, p.bias
    if (x.requires_grad or weights.requires_grad or bias.requires_grad) and _recording():
        out.requires_grad = True
        out._prev = (x, weights, bias)

        def _bw():
            g2 = out.grad.transpose(0, 2, 3, 1).reshape(-1, f)
            if weights.requires_grad:
                # Patches recomputed here: cheaper than holding every layer's
                # im2col buffer alive until backward.
                cols_b = _im2col(xp, kh, kw, sh, sw, oh, ow)
                weights.add_grad((g2.T @ cols_b).reshape(f, c, kh, kw))
            if bias.requires_grad:
                bias.add_grad(g2.sum(axis=0))
            if x.requires_grad:
                dcols = (g2 @ w2.T).reshape(n, oh, ow, c, kh, kw)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
                x.add_grad(dxp[:, :, pt : pt + h, pl : pl + w])

        out._backward = _bw
    return out


def conv2d_naive(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                 stride=1, padding: str = "valid") -> np.ndarray:
    """Six-loop reference convolution (oracle, forward only, no graph)."""
    n, c, h, w = x.shape
    f, _, kh, kw = weights.shape
    sh, sw = _pair(stride)
    oh = conv_output_size(h, kh, sh, padding)
    ow = conv_output_size(w, kw, sw, padding)
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pad(h, kh, sh), _same_pad(w, kw, sw)
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    out = np.zeros((n, f, oh, ow), dtype=x.dtype)
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            acc += float(
                                x[b, ch, i * sh + u, j * sw : j * sw + kw]
                                @ weights[o, ch, u]
                            )
                    out[b, o, i, j] = acc + bias[o]
    return out


# ---- pooling ------------------------------------------------------------------------


def maxpool2d(x: Tensor, window, stride=None) -> tuple[Tensor, np.ndarray]:
    """Max pool; returns (pooled tensor, per-window argmax in row-major window order).

    Ties go to the first (row-major) maximum, so backward is deterministic.
    """
    wh, ww = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    if wh > h or ww > w:
        raise ValueError(f"pool window ({wh},{ww}) exceeds input extent ({h},{w})")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    sn, sc, srow, scol = x.data.strides
    windows = as_strided(
        x.data,
        shape=(n, c, oh, ow, wh, ww),
        strides=(sn, sc, srow * sh, scol * sw, srow, scol),
        writeable=False,
    )
    flat = windows.reshape(n, c, oh, ow, wh * ww)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    if x.requires_grad and _recording():
        out.requires_grad = True
        out._prev = (x,)

        def _bw():
            ni, ci, ohi, owi = np.indices((n, c, oh, ow), sparse=True)
            rows = ohi * sh + arg // ww
            cols = owi * sw + arg % ww
            dx = np.zeros_like(x.data)
            if sh >= wh and sw >= ww:  # disjoint windows: indices are unique
                dx[ni, ci, rows, cols] += out.grad
            else:
                np.add.at(dx, (ni, ci, rows, cols), out.grad)
            x.add_grad(dx)

        out._backward = _bw
    return out, arg


def gap(x: Tensor) -> Tensor:
    """Global average pooling: NCHW -> NC spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"gap expects NCHW input, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


# ---- dense ----------------------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N,D] @ [D,U] + [U]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ValueError(f"dense dimension mismatch: input {x.shape} vs weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[1]} units")
    return x @ weights + bias


# ---- batch normalization ------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics (one entry per channel)."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    @staticmethod
    def create(channels: int, momentum: float = 0.9, epsilon: float = 1e-5) -> "BatchNormState":
        return BatchNormState(
            gamma=Tensor(np.ones(channels, dtype=np.float32), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True),
            running_mean=np.zeros(channels, dtype=np.float32),
            running_var=np.ones(channels, dtype=np.float32),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel normalization; batch statistics in train mode, running stats in infer."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    if x.ndim == 4:
        axes, param_shape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, param_shape = (0,), (1, -1)
    else:
        raise ValueError(f"batchnorm expects 2-D or 4-D input, got shape {x.shape}")
    gamma = state.gamma.reshape(*param_shape)
    beta = state.beta.reshape(*param_shape)

    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm train mode needs batch size >= 2")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean.data.reshape(-1)).astype(
            state.running_mean.dtype
        )
        state.running_var = (m * state.running_var + (1 - m) * var.data.reshape(-1)).astype(
            state.running_var.dtype
        )
    else:
        mean = Tensor(state.running_mean.reshape(param_shape).astype(x.dtype))
        var = Tensor(state.running_var.reshape(param_shape).astype(x.dtype))
        centered = x - mean
    xhat = centered / (var + state.epsilon).sqrt()
    return gamma * xhat + beta


# ---- dropout ------------------------------------------------------------------------------


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: train zeroes with probability `rate` and rescales; infer is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    return x * Tensor(keep * (1.0 / (1.0 - rate)))


# ---- activations ----------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if x.requires_grad and _recording():
        out.requires_grad = True
        out._prev = (x,)
        mask = x.data > 0

        def _bw():
            x.add_grad(out.grad * mask)

        out._backward = _bw
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    pos = d >= 0
    out_data = np.empty_like(d)
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)
    if x.requires_grad and _recording():
        out.requires_grad = True
        out._prev = (x,)

        def _bw():
            x.add_grad(out.grad * out.data * (1.0 - out.data))

        out._backward = _bw
    return out


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction stabilization."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    if x.requires_grad and _recording():
        out.requires_grad = True
        out._prev = (x,)

        def _bw():
            g = out.grad
            x.add_grad(s * (g - (g * s).sum(axis=-1, keepdims=True)))

        out._backward = _bw
    return out


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
