"""Sobel boundary extraction and boundary-injected decoding blocks."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .engine import ShapeError, Tensor, default_dtype
from .engine import functional as F
from .nn import Conv2d, ConvBNReLU, Module, Sequential, _param

# Cross-correlation kernels: K_X responds to left-to-right increase,
# K_Y to top-to-bottom increase.
SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0],
                    [0.0, 0.0, 0.0],
                    [1.0, 2.0, 1.0]])


def sobel_kernels(dtype=None) -> Tensor:
    """The fixed pair stacked as a ``(2, 1, 3, 3)`` constant (never trained)."""
    dtype = dtype or default_dtype()
    return Tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None].astype(dtype))


class BoundaryBundle(NamedTuple):
    features: Tensor  # F_b, stride 4
    logits: Tensor  # (N, 1, H/4, W/4)


def sobel_gradients(f: Tensor, kernels: Optional[Tensor] = None):
    """Depthwise gradient maps ``(M_x, M_y)``, each shaped like ``f``.

    Borders are replicate-padded so a constant map has zero gradient
    everywhere; this also keeps maps smaller than 3x3 (the stride-32
    feature of a small input) well defined. ``kernels`` defaults to the
    fixed Sobel pair; a learned ``(2, 1, 3, 3)`` parameter can be passed.
    """
    n, c, h, w = f.shape
    k = sobel_kernels(f.dtype) if kernels is None else kernels
    x = F.pad2d(f, (1, 1, 1, 1), mode="replicate")
    x = F.reshape(x, (n * c, 1, h + 2, w + 2))
    m = F.reshape(F.conv2d(x, k), (n, c, 2, h, w))
    m = F.reshape(F.permute(m, (0, 2, 1, 3, 4)), (n, 2 * c, h, w))
    return F.slice_channels(m, 0, c), F.slice_channels(m, c, 2 * c)


def bem_enhance(f: Tensor, kernels: Optional[Tensor] = None) -> Tensor:
    """Gate ``f`` by the sigmoid of its own edge response.

    The concatenated ``[M_x, M_y]`` (2C channels) is brought back to C by a
    fixed averaging 1x1 projection, i.e. ``(M_x + M_y) / 2`` per channel.
    """
    mx, my = sobel_gradients(f, kernels)
    mxy = F.scale(F.add(mx, my), 0.5)
    return F.mul(f, F.sigmoid(mxy))


class EdgeOperator(Module):
    """Holds the edge kernels: fixed Sobel, or learned (the CBM ablation)."""

    def __init__(self, learned: bool = False):
        super().__init__()
        self.learned = learned
        if learned:
            self.kernels = _param((2, 1, 3, 3), "kaiming")
        else:
            self._fixed = sobel_kernels()

    def weight(self, dtype) -> Tensor:
        if self.learned:
            return self.kernels
        if self._fixed.dtype != dtype:
            self._fixed = sobel_kernels(dtype)
        return self._fixed

    def forward(self, f: Tensor) -> Tensor:
        return bem_enhance(f, self.weight(f.dtype))


class BoundaryExtractor(Module):
    """Fuses gated stride-4 and stride-32 features and predicts boundaries."""

    def __init__(self, c_low: int, c_high: int, width: int, learned: bool = False):
        super().__init__()
        self.edge = EdgeOperator(learned)
        self.reduce_high = Conv2d(c_high, width, 1)
        self.align_high = Conv2d(width, width, 1)
        self.align_low = Conv2d(c_low, width, 1)
        self.fuse = Sequential([ConvBNReLU(2 * width, width), ConvBNReLU(width, width)])
        self.head = Conv2d(width, 1, 1)

    def enhance(self, f: Tensor) -> Tensor:
        return self.edge(f)

    def fuse_levels(self, e_low: Tensor, e_high: Tensor) -> BoundaryBundle:
        _, _, h, w = e_low.shape
        _, _, hh, wh = e_high.shape
        if h != 8 * hh or w != 8 * wh:
            raise ShapeError(
                f"bem_fuse: low-level {h}x{w} must be exactly 8x the high-level {hh}x{wh}"
            )
        hi = F.upsample_bilinear(self.reduce_high(e_high), h, w)
        hi = self.align_high(hi)
        lo = self.align_low(e_low)
        fb = self.fuse(F.concat_channels([lo, hi]))
        return BoundaryBundle(fb, self.head(fb))

    def forward(self, f_low: Tensor, f_high: Tensor) -> BoundaryBundle:
        return self.fuse_levels(self.enhance(f_low), self.enhance(f_high))


def bem_fuse(e_low: Tensor, e_high: Tensor, module: BoundaryExtractor) -> BoundaryBundle:
    return module.fuse_levels(e_low, e_high)


def _check_spatial(*ts: Tensor) -> None:
    hw = ts[0].shape[2:]
    for t in ts[1:]:
        if t.shape[2:] != hw:
            raise ShapeError(f"spatial mismatch: {ts[0].shape} vs {t.shape}")


class BoundaryInjection(Module):
    """Dual-path decoder block.

    Foreground: two Conv-BN-ReLU on ``[F_b, F_c, F_d]``. Background: the skip
    feature is gated by ``1 - sigmoid(r(F_d))`` with ``r`` a 1x1 conv to one
    channel (broadcast over channels), then three Conv-BN-ReLU. Output: one
    Conv-BN-ReLU on ``[F_fg, F_bg, F_d]``.
    """

    def __init__(self, c_b: int, c_skip: int, c_prev: int, cout: int):
        super().__init__()
        self.fg = Sequential([ConvBNReLU(c_b + c_skip + c_prev, cout), ConvBNReLU(cout, cout)])
        self.reduce = Conv2d(c_prev, 1, 1)
        self.bg = Sequential([ConvBNReLU(c_skip, cout), ConvBNReLU(cout, cout), ConvBNReLU(cout, cout)])
        self.out = ConvBNReLU(2 * cout + c_prev, cout)

    def background_attention(self, prev: Tensor) -> Tensor:
        return F.one_minus(F.sigmoid(self.reduce(prev)))

    def forward(self, fb: Tensor, skip: Tensor, prev: Tensor) -> Tensor:
        _check_spatial(fb, skip, prev)
        f_fg = self.fg(F.concat_channels([fb, skip, prev]))
        gate = F.expand_channels(self.background_attention(prev), skip.shape[1])
        f_bg = self.bg(F.mul(gate, skip))
        return self.out(F.concat_channels([f_fg, f_bg, prev]))


def bim_forward(fb: Tensor, skip: Tensor, prev: Tensor, module: BoundaryInjection) -> Tensor:
    return module(fb, skip, prev)


class PlainDecoderBlock(Module):
    """U-Net style block used when boundary injection is ablated."""

    def __init__(self, c_skip: int, c_prev: int, cout: int):
        super().__init__()
        self.convs = Sequential([ConvBNReLU(c_skip + c_prev, cout), ConvBNReLU(cout, cout)])

    def forward(self, skip: Tensor, prev: Tensor) -> Tensor:
        _check_spatial(skip, prev)
        return self.convs(F.concat_channels([skip, prev]))
