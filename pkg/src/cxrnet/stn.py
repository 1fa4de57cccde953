"""Spatial transformer front block: λ re-centering, batch normalization, and a
differentiable transformer (localization network, affine grid, bilinear sampler).

Coordinate convention: normalized frame [-1, 1] with (-1, -1) at the top-left
pixel center (align-corners), so pixel x = (x_norm + 1) / 2 * (W - 1).  Samples
landing outside the frame contribute zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    BatchNormState,
    ConvParams,
    batchnorm,
    conv2d,
    dense,
    flatten,
    kaiming_uniform,
    maxpool2d,
    relu,
)
from .tensor import Tensor, is_grad_enabled

IDENTITY_THETA = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float32)


def lambda_scale(x: Tensor) -> Tensor:
    """Shift [0,1]-normalized pixels to [-0.5, 0.5] so a mid-gray maps to 0."""
    return x - 0.5


@dataclass
class LocNet:
    """Localization network predicting one 2x3 affine theta per sample.

    The final dense layer starts at zero weights with the identity transform as
    bias, so an untrained network is an exact no-op transformer.
    """

    conv1: ConvParams
    conv2: ConvParams
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @staticmethod
    def create(in_channels: int, in_h: int, in_w: int,
               rng: np.random.Generator | None = None) -> "LocNet":
        if in_h < 8 or in_w < 8:
            raise ValueError(f"locnet needs at least 8x8 input for its two pooling stages, got {in_h}x{in_w}")
        rng = rng if rng is not None else np.random.default_rng()
        conv1 = ConvParams.create(8, 5, in_channels, stride=1, padding="same", rng=rng)
        conv2 = ConvParams.create(8, 5, 8, stride=1, padding="same", rng=rng)
        flat = 8 * (in_h // 2 // 2) * (in_w // 2 // 2)
        return LocNet(
            conv1=conv1,
            conv2=conv2,
            fc1_w=Tensor(kaiming_uniform((flat, 32), fan_in=flat, rng=rng), requires_grad=True),
            fc1_b=Tensor(np.zeros(32, dtype=np.float32), requires_grad=True),
            fc2_w=Tensor(np.zeros((32, 6), dtype=np.float32), requires_grad=True),
            fc2_b=Tensor(IDENTITY_THETA.copy(), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.conv1.weights, self.conv1.bias, self.conv2.weights, self.conv2.bias,
                self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


def locnet_forward(x: Tensor, p: LocNet) -> Tensor:
    """Run the localization stack; returns theta with shape [N, 2, 3]."""
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise ValueError(f"locnet input spatial extent {x.shape[2]}x{x.shape[3]} below the 8x8 minimum")
    h, _ = maxpool2d(relu(conv2d(x, p.conv1)), 2, 2)
    h, _ = maxpool2d(relu(conv2d(h, p.conv2)), 2, 2)
    h = relu(dense(flatten(h), p.fc1_w, p.fc1_b))
    theta = dense(h, p.fc2_w, p.fc2_b)
    return theta.reshape(x.shape[0], 2, 3)


def affine_grid(theta: Tensor, out_h: int, out_w: int) -> Tensor:
    """Map the normalized target lattice through theta; returns [N, H', W', 2] (x, y)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"grid extent must be positive, got {out_h}x{out_w}")
    n = theta.shape[0]
    ys, xs = np.meshgrid(
        np.linspace(-1.0, 1.0, out_h, dtype=theta.dtype),
        np.linspace(-1.0, 1.0, out_w, dtype=theta.dtype),
        indexing="ij",
    )
    lattice = Tensor(np.stack([xs.ravel(), ys.ravel(), np.ones(out_h * out_w, dtype=theta.dtype)]))
    src = theta.reshape(2 * n, 3) @ lattice  # row pairs: (x-coords, y-coords) per sample
    return src.reshape(n, 2, out_h * out_w).transpose((0, 2, 1)).reshape(n, out_h, out_w, 2)


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample an NCHW batch at grid locations with zero padding outside the frame.

    Differentiable in both the image (scatter of corner weights) and the grid
    (finite per-axis neighbor differences scaled by the pixel/normalized ratio).
    """
    n, c, h, w = x.shape
    # Pixel-space coords in float64: float32 lattice values round, and scaling
    # that noise by (W-1)/2 would push exact lattice hits off their pixels.
    gx = (grid.data[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    gy = (grid.data[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x1, y1 = x0 + 1, y0 + 1
    wx = (gx - x0).astype(x.dtype)
    wy = (gy - y0).astype(x.dtype)

    def corner(yi, xi):
        valid = ((yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)).astype(x.dtype)
        yc = np.clip(yi, 0, h - 1)
        xc = np.clip(xi, 0, w - 1)
        return valid, yc, xc

    ni = np.arange(n)[:, None, None]
    v00, y0c, x0c = corner(y0, x0)
    v01, _, x1c = corner(y0, x1)
    v10, y1c, _ = corner(y1, x0)
    v11 = ((y1 >= 0) & (y1 < h) & (x1 >= 0) & (x1 < w)).astype(x.dtype)

    img = x.data.transpose(0, 2, 3, 1)  # NHWC view for gathers
    p00 = img[ni, y0c, x0c] * v00[..., None]
    p01 = img[ni, y0c, x1c] * v01[..., None]
    p10 = img[ni, y1c, x0c] * v10[..., None]
    p11 = img[ni, y1c, x1c] * v11[..., None]

    w00 = ((1 - wy) * (1 - wx))[..., None]
    w01 = ((1 - wy) * wx)[..., None]
    w10 = (wy * (1 - wx))[..., None]
    w11 = (wy * wx)[..., None]
    out_nhwc = w00 * p00 + w01 * p01 + w10 * p10 + w11 * p11
    out = Tensor(out_nhwc.transpose(0, 3, 1, 2))

    if (x.requires_grad or grid.requires_grad) and is_grad_enabled():
        out.requires_grad = True
        out._prev = (x, grid)

        def _bw():
            g = out.grad.transpose(0, 2, 3, 1)  # [N, H', W', C]
            if x.requires_grad:
                dimg = np.zeros_like(img)
                np.add.at(dimg, (ni, y0c, x0c), w00 * v00[..., None] * g)
                np.add.at(dimg, (ni, y0c, x1c), w01 * v01[..., None] * g)
                np.add.at(dimg, (ni, y1c, x0c), w10 * v10[..., None] * g)
                np.add.at(dimg, (ni, y1c, x1c), w11 * v11[..., None] * g)
                x.add_grad(dimg.transpose(0, 3, 1, 2))
            if grid.requires_grad:
                wyc = wy[..., None]
                wxc = wx[..., None]
                dpx = ((1 - wyc) * (p01 - p00) + wyc * (p11 - p10)) * g
                dpy = ((1 - wxc) * (p10 - p00) + wxc * (p11 - p01)) * g
                dg = np.stack(
                    [dpx.sum(axis=-1) * (0.5 * (w - 1)), dpy.sum(axis=-1) * (0.5 * (h - 1))],
                    axis=-1,
                )
                grid.add_grad(dg.astype(grid.dtype))

        out._backward = _bw
    return out


@dataclass
class STNParams:
    """λ-scale + batchnorm + transformer parameters for one input geometry."""

    bn: BatchNormState
    locnet: LocNet

    @staticmethod
    def create(in_channels: int, in_h: int, in_w: int,
               rng: np.random.Generator | None = None) -> "STNParams":
        return STNParams(
            bn=BatchNormState.create(in_channels),
            locnet=LocNet.create(in_channels, in_h, in_w, rng),
        )

    def parameters(self) -> list[Tensor]:
        return [self.bn.gamma, self.bn.beta] + self.locnet.parameters()


def stn_block(x: Tensor, p: STNParams, mode: str = "train") -> Tensor:
    """lambda_scale -> batchnorm -> (locnet, affine_grid, bilinear_sample)."""
    t = batchnorm(lambda_scale(x), p.bn, mode)
    theta = locnet_forward(t, p.locnet)
    grid = affine_grid(theta, x.shape[2], x.shape[3])
    return bilinear_sample(t, grid)
