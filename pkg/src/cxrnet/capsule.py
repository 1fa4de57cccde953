"""Capsule primitives: squash, primary capsules, dynamic routing, length readout,
margin loss.  Basic (stride-1 'valid' conv) and modified (stride-2 'same') variants
differ only in the two convolution stages' geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConvParams, conv2d, conv_output_size, glorot_uniform, relu
from .tensor import Tensor, is_grad_enabled

# Norm guard: 1e-8 in norm units, so the squared term under the sqrt is 1e-16.
# Keeps squash(0) = 0 without measurably bending norms near 1.
_NORM_EPS_SQ = 1e-16


@dataclass
class CapsuleConfig:
    conv_filters: int = 256
    conv_kernel: int = 9
    conv_stride: int = 1
    conv_padding: str = "valid"
    primary_dim: int = 8
    primary_channels: int = 32
    primary_kernel: int = 9
    primary_stride: int = 2
    primary_padding: str = "valid"
    n_class: int = 2
    digit_dim: int = 16
    routings: int = 3

    @staticmethod
    def basic() -> "CapsuleConfig":
        return CapsuleConfig(conv_stride=1, conv_padding="valid", primary_padding="valid")

    @staticmethod
    def modified() -> "CapsuleConfig":
        return CapsuleConfig(conv_stride=2, conv_padding="same", primary_padding="same")


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """v = (‖s‖²/(1+‖s‖²))·(s/‖s‖), guarded so squash(0) = 0."""
    sqn = (s * s).sum(axis=axis, keepdims=True)
    norm = (sqn + _NORM_EPS_SQ).sqrt()
    return s * (norm / (sqn + 1.0))


def primary_caps(features: Tensor, conv: ConvParams, cfg: CapsuleConfig) -> Tensor:
    """Convolve into channel groups and reshape to squashed capsules [N, caps, dim].

    Channel axis splits as primary_channels groups of primary_dim; capsule order is
    (row, col, group), row-major.
    """
    n = features.shape[0]
    t = conv2d(features, conv)
    t = t.transpose((0, 2, 3, 1)).reshape(n, -1, cfg.primary_dim)
    return squash(t)


def caps_predict(u: Tensor, w: Tensor) -> Tensor:
    """Per-pair prediction vectors û[n,i,j,:] = W[i,j,:,:] @ u[n,i,:].

    u: [N, in_caps, in_dim]; w: [in_caps, n_class, out_dim, in_dim] -> [N, in_caps, n_class, out_dim].
    """
    if u.ndim != 3 or w.ndim != 4 or u.shape[1] != w.shape[0] or u.shape[2] != w.shape[3]:
        raise ValueError(f"capsule prediction shape mismatch: u {u.shape} vs w {w.shape}")
    out = Tensor(np.einsum("ijkd,nid->nijk", w.data, u.data))
    if (u.requires_grad or w.requires_grad) and is_grad_enabled():
        out.requires_grad = True
        out._prev = (u, w)

        def _bw():
            if w.requires_grad:
                w.add_grad(np.einsum("nijk,nid->ijkd", out.grad, u.data))
            if u.requires_grad:
                u.add_grad(np.einsum("nijk,ijkd->nid", out.grad, w.data))

        out._backward = _bw
    return out


def routing(u_hat: Tensor, iterations: int, coupling_out: list | None = None) -> Tensor:
    """Dynamic routing by agreement over û [N, in_caps, n_class, dim].

    Logits start at zero; each iteration softmaxes them per input capsule,
    forms class sums, squashes, and (except on the last pass) adds the
    û·v agreement back into the logits.  The loop is unrolled in the graph,
    so gradients flow through every iteration.
    """
    if iterations < 1:
        raise ValueError(f"routing needs at least 1 iteration, got {iterations}")
    n, in_caps, n_class, dim = u_hat.shape
    b = Tensor(np.zeros((n, in_caps, n_class), dtype=u_hat.dtype))
    v = None
    for it in range(iterations):
        c = _softmax_last(b)
        if coupling_out is not None:
            coupling_out.append(c.data.copy())
        s = (c.reshape(n, in_caps, n_class, 1) * u_hat).sum(axis=1)
        v = squash(s)
        if it < iterations - 1:
            b = b + (u_hat * v.reshape(n, 1, n_class, dim)).sum(axis=-1)
    return v


def _softmax_last(x: Tensor) -> Tensor:
    e = (x - Tensor(x.data.max(axis=-1, keepdims=True))).exp()
    return e / e.sum(axis=-1, keepdims=True)


def capsule_length(v: Tensor) -> Tensor:
    """Euclidean norm per capsule: [N, n_class, dim] -> [N, n_class]."""
    sqn = (v * v).sum(axis=-1)
    return (sqn + _NORM_EPS_SQ).sqrt()


def margin_loss(lengths: Tensor, labels: np.ndarray, m_pos: float = 0.9,
                m_neg: float = 0.1, lam: float = 0.5) -> Tensor:
    """Two-sided hinge on capsule lengths, averaged over the batch."""
    labels = np.asarray(labels)
    if labels.shape != lengths.shape:
        raise ValueError(f"labels shape {labels.shape} != lengths shape {lengths.shape}")
    if not np.all(np.isin(labels, (0, 1))) or not np.all(labels.sum(axis=-1) == 1):
        raise ValueError("labels must be one-hot rows")
    t = Tensor(labels.astype(lengths.dtype))
    pos = relu(Tensor(np.full_like(lengths.data, m_pos)) - lengths)
    neg = relu(lengths - m_neg)
    per_class = t * pos * pos + lam * (1.0 - t) * neg * neg
    return per_class.sum(axis=-1).mean()


@dataclass
class CapsNetParams:
    """Learnable tensors for one capsule network."""

    conv1: ConvParams
    primary_conv: ConvParams
    routing_w: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.conv1.weights, self.conv1.bias,
                self.primary_conv.weights, self.primary_conv.bias, self.routing_w]


def capsnet_create(cfg: CapsuleConfig, in_channels: int, in_h: int, in_w: int,
                   rng: np.random.Generator | None = None) -> CapsNetParams:
    rng = rng if rng is not None else np.random.default_rng()
    conv1 = ConvParams.create(cfg.conv_filters, cfg.conv_kernel, in_channels,
                              stride=cfg.conv_stride, padding=cfg.conv_padding, rng=rng)
    primary_conv = ConvParams.create(
        cfg.primary_channels * cfg.primary_dim, cfg.primary_kernel, cfg.conv_filters,
        stride=cfg.primary_stride, padding=cfg.primary_padding, rng=rng, init="glorot")
    caps = num_primary_caps(cfg, in_h, in_w)
    w = glorot_uniform((caps, cfg.n_class, cfg.digit_dim, cfg.primary_dim),
                       fan_in=cfg.primary_dim, fan_out=cfg.digit_dim, rng=rng)
    return CapsNetParams(conv1=conv1, primary_conv=primary_conv,
                         routing_w=Tensor(w, requires_grad=True))


def num_primary_caps(cfg: CapsuleConfig, in_h: int, in_w: int) -> int:
    h = conv_output_size(in_h, cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding)
    w = conv_output_size(in_w, cfg.conv_kernel, cfg.conv_stride, cfg.conv_padding)
    h = conv_output_size(h, cfg.primary_kernel, cfg.primary_stride, cfg.primary_padding)
    w = conv_output_size(w, cfg.primary_kernel, cfg.primary_stride, cfg.primary_padding)
    return h * w * cfg.primary_channels


def capsnet_forward(x: Tensor, p: CapsNetParams, cfg: CapsuleConfig,
                    coupling_out: list | None = None) -> Tensor:
    """conv1+relu -> primary capsules -> routed DiagnosisCaps -> lengths [N, n_class]."""
    feats = relu(conv2d(x, p.conv1))
    u = primary_caps(feats, p.primary_conv, cfg)
    u_hat = caps_predict(u, p.routing_w)
    v = routing(u_hat, cfg.routings, coupling_out)
    return capsule_length(v)
