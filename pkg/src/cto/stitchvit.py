"""Stitch-strided multi-head self-attention stream.

A feature map is split into ``s*s`` interleaved sub-grids ("stitching"):
sub-grid ``(a, b)`` (1-based phases) holds pixels ``x[a-1::s, b-1::s]`` and
sits at group index ``(a-1)*s + (b-1)``. Attention runs independently inside
each sub-grid, so a rate-``s`` layer mixes tokens that are ``s`` pixels apart
at a cost of ``n^2 d / s^2`` instead of ``n^2 d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .engine import ShapeError, Tensor, mac_tag
from .engine import functional as F
from .nn import Conv2d, ConvBNReLU, Module, ModuleList, _param


@dataclass
class StitchConfig:
    rates: List[int] = field(default_factory=lambda: [2, 4, 8, 16])
    heads_per_rate: int = 2
    embed_dim: int = 32
    attn_dim: int = 8

    def validate(self) -> list:
        errs = []
        if list(self.rates) != sorted(self.rates):
            errs.append(f"vit.rates must be ascending, got {self.rates}")
        if any(r < 1 for r in self.rates):
            errs.append("vit.rates must be positive")
        if self.embed_dim < len(self.rates):
            errs.append(f"vit.embed_dim {self.embed_dim} smaller than number of rates")
        if self.heads_per_rate < 1 or self.attn_dim < 1:
            errs.append("vit.heads_per_rate and vit.attn_dim must be positive")
        return errs

    def group_channels(self) -> list:
        """Equal split over rate groups; the remainder goes to the smallest rate."""
        g = len(self.rates)
        base, rem = divmod(self.embed_dim, g)
        return [base + (rem if i == 0 else 0) for i in range(g)]


# ------------------------------------------------------------------ stitching

def stitch(x: Tensor, s: int) -> Tensor:
    """``(N, C, H, W)`` -> ``(N, s*s, C, H/s, W/s)`` phase sub-grids."""
    n, c, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"stitch: {h}x{w} not divisible by rate {s}")
    y = F.reshape(x, (n, c, h // s, s, w // s, s))
    y = F.permute(y, (0, 3, 5, 1, 2, 4))
    return F.reshape(y, (n, s * s, c, h // s, w // s))


def unstitch(g: Tensor, s: int) -> Tensor:
    """Inverse of :func:`stitch`."""
    n, k, c, hs, ws = g.shape
    if k != s * s:
        raise ShapeError(f"unstitch: {k} groups given, rate {s} needs {s * s}")
    y = F.reshape(g, (n, s, s, c, hs, ws))
    y = F.permute(y, (0, 3, 4, 1, 5, 2))
    return F.reshape(y, (n, c, hs * s, ws * s))


def stitch_by_subsampling(x: Tensor, s: int) -> Tensor:
    """Reference stitch built from ``s*s`` strided gathers."""
    parts = [
        F.strided_subsample(x, s, a, b) for a in range(1, s + 1) for b in range(1, s + 1)
    ]
    return F.stack_groups(parts)


# ------------------------------------------------------------------ attention

class AttentionParams(Module):
    """Per-head query/key/value projections packed as ``(C, heads*d_k)``."""

    def __init__(self, dim: int, heads: int, d_k: int):
        super().__init__()
        self.heads = heads
        self.d_k = d_k
        self.w_q = _param((dim, heads * d_k), "xavier")
        self.w_k = _param((dim, heads * d_k), "xavier")
        self.w_v = _param((dim, heads * d_k), "xavier")
        self.w_o = _param((heads * d_k, dim), "xavier")


def group_mhsa(g: Tensor, p: AttentionParams, heads: Optional[int] = None) -> Tensor:
    """Multi-head self-attention restricted to each stitched patch.

    ``g`` has shape ``(N, P, C, h, w)``; the ``h*w`` positions of a patch are
    its tokens and the ``C`` channels its embedding. No positional encoding.
    """
    heads = p.heads if heads is None else heads
    n, npatch, c, hs, ws = g.shape
    dk = p.d_k
    if p.w_q.shape[0] != c:
        raise ShapeError(f"group_mhsa: embedding dim {c} != projection rows {p.w_q.shape[0]}")
    if p.w_q.shape[1] != heads * dk:
        raise ShapeError(
            f"group_mhsa: projection width {p.w_q.shape[1]} not divisible into {heads} heads"
        )
    t = hs * ws
    tokens = F.permute(F.reshape(g, (n, npatch, c, t)), (0, 1, 3, 2))  # (N, P, T, C)

    def split(z):
        return F.permute(F.reshape(z, (n, npatch, t, heads, dk)), (0, 1, 3, 2, 4))

    with mac_tag("attn_proj"):
        q = split(F.matmul(tokens, p.w_q))
        k = split(F.matmul(tokens, p.w_k))
        v = split(F.matmul(tokens, p.w_v))
    with mac_tag("attn_scores"):
        scores = F.matmul(q, F.permute(k, (0, 1, 2, 4, 3)))
    attn = F.softmax_lastdim(F.scale(scores, 1.0 / math.sqrt(dk)))
    with mac_tag("attn_mix"):
        mixed = F.matmul(attn, v)  # (N, P, heads, T, dk)
    mixed = F.reshape(F.permute(mixed, (0, 1, 3, 2, 4)), (n, npatch, t, heads * dk))
    with mac_tag("attn_proj"):
        out = F.matmul(mixed, p.w_o)  # (N, P, T, C)
    return F.reshape(F.permute(out, (0, 1, 3, 2)), (n, npatch, c, hs, ws))


class ConvFFN(Module):
    """conv3x3 -> ReLU -> conv3x3, channel preserving."""

    def __init__(self, c: int):
        super().__init__()
        self.conv1 = Conv2d(c, c, 3)
        self.conv2 = Conv2d(c, c, 3)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(x)))


class StitchBlock(Module):
    """stitch -> attention -> unstitch -> residual -> conv FFN -> residual."""

    def __init__(self, c: int, rate: int, heads: int, d_k: int):
        super().__init__()
        self.rate = rate
        self.attn = AttentionParams(c, heads, d_k)
        self.ffn = ConvFFN(c)

    def forward(self, x: Tensor) -> Tensor:
        a = unstitch(group_mhsa(stitch(x, self.rate), self.attn), self.rate)
        x = F.add(x, a)
        return F.add(x, self.ffn(x))


def pad_to_multiple(x: Tensor, m: int):
    """Reflection-pad H and W up to multiples of ``m``; returns (tensor, pads)."""
    _, _, h, w = x.shape
    ph, pw = (-h) % m, (-w) % m
    pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph == 0 and pw == 0:
        return x, pads
    return F.pad2d(x, pads, mode="reflect"), pads


class StitchViT(Module):
    """Image -> stride-4 embedding -> per-rate stitch blocks -> fuse -> stride 32.

    The image stem is a single 4x4 stride-4 conv, so this stream runs in
    parallel with the CNN stream. Rate outputs are concatenated and fused by
    a 3x3 conv; three stride-2 Conv-BN-ReLU layers then bring the result to
    the stride-32 grid. ``forward_pyramid`` also returns the stride 4/8/16
    intermediates (used as skips when the CNN stream is disabled).
    """

    def __init__(self, cfg: StitchConfig, out_channels: int, in_channels: int = 3,
                 pyramid_channels=None):
        super().__init__()
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.cfg = cfg
        self.embed = Conv2d(in_channels, cfg.embed_dim, 4, stride=4, padding=0)
        self.splits = cfg.group_channels()
        self.blocks = ModuleList([
            StitchBlock(c, r, cfg.heads_per_rate, cfg.attn_dim)
            for c, r in zip(self.splits, cfg.rates)
        ])
        self.fuse = Conv2d(cfg.embed_dim, cfg.embed_dim, 3)
        chans = list(pyramid_channels) if pyramid_channels else [cfg.embed_dim] * 2
        chans = chans + [out_channels]
        self.down = ModuleList([
            ConvBNReLU(cin, cout, 3, stride=2)
            for cin, cout in zip([cfg.embed_dim] + chans[:-1], chans)
        ])

    def forward_groups(self, f: Tensor) -> Tensor:
        """Stitch blocks + fusion on a stride-4 feature map (same shape out)."""
        _, c, h, w = f.shape
        if c != self.cfg.embed_dim:
            raise ShapeError(f"StitchViT: feature has {c} channels, config says {self.cfg.embed_dim}")
        x, pads = pad_to_multiple(f, max(self.cfg.rates))
        outs = []
        start = 0
        for width, block in zip(self.splits, self.blocks):
            outs.append(block(F.slice_channels(x, start, start + width)))
            start += width
        y = self.fuse(F.concat_channels(outs))
        if y.shape[2:] != (h, w):
            y = F.crop2d(y, pads[0], pads[2], h, w)
        return y

    def forward_pyramid(self, image: Tensor) -> list:
        f = self.forward_groups(self.embed(image))
        feats = [f]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        return feats

    def forward(self, image: Tensor) -> Tensor:
        return self.forward_pyramid(image)[-1]


def count_attention_macs(grid_h: int, grid_w: int, channels: int, rates) -> dict:
    """Analytic and measured score-product MACs, dense vs stitched.

    Token mixing here is the ``Q K^T`` product: ``n^2 d`` for dense attention
    over ``n = grid_h * grid_w`` tokens with total key width ``d``, and
    ``s^2 (n / s^2)^2 d = n^2 d / s^2`` at stitch rate ``s``. The measured
    figure runs :func:`group_mhsa` on a random map under the MAC counter.
    """
    from .engine import count_macs, no_grad, precision

    n = grid_h * grid_w
    dense = n * n * channels
    rows = []
    for s in rates:
        if grid_h % s or grid_w % s:
            raise ShapeError(f"grid {grid_h}x{grid_w} not divisible by rate {s}")
        analytic = n * n * channels // (s * s)
        with precision(np.float64), no_grad():
            p = AttentionParams(channels, 1, channels)
            x = Tensor(np.zeros((1, channels, grid_h, grid_w)))
            with count_macs() as counter:
                group_mhsa(stitch(x, s), p)
        rows.append({
            "rate": s,
            "analytic": analytic,
            "measured": counter["attn_scores"],
            "reduction": dense / analytic,
        })
    return {"tokens": n, "dim": channels, "dense_macs": dense, "stitched": rows}
