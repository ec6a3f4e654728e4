"""Res2Net-style convolutional encoder producing features at strides 4..32."""

from __future__ import annotations

from typing import NamedTuple, Sequence

from .engine import ShapeError, Tensor
from .engine import functional as F
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Module, ModuleList

SCALE = 4


class EncoderFeatures(NamedTuple):
    f1: Tensor  # stride 4
    f2: Tensor  # stride 8
    f3: Tensor  # stride 16
    f4: Tensor  # stride 32


class Res2Module(Module):
    """Bottleneck with a 4-way cascaded split between two 1x1 convs.

    After ``conv_in`` the features are split into X1..X4 along channels.
    Y1 = X1, Y2 = K2(X2) and Yi = Ki(Xi + Y(i-1)) for i = 3, 4, where each
    Ki is a 3x3 Conv-BN-ReLU. The concatenated Y's go through ``conv_out``
    and BN, are added to the (projected) input and pass a final ReLU. A
    stride-2 module downsamples in ``conv_in`` and in the shortcut.
    """

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        if cout % SCALE:
            raise ValueError(f"Res2Module: channel count {cout} not divisible by scale {SCALE}")
        width = cout // SCALE
        self.width = width
        self.conv_in = ConvBNReLU(cin, cout, k=1, stride=stride)
        self.scale_convs = ModuleList([ConvBNReLU(width, width, k=3) for _ in range(SCALE - 1)])
        self.conv_out = ConvBNReLU(cout, cout, k=1, relu=False)
        if stride != 1 or cin != cout:
            self.shortcut = ConvBNReLU(cin, cout, k=1, stride=stride, relu=False)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv_in(x)
        w = self.width
        xs = [F.slice_channels(h, i * w, (i + 1) * w) for i in range(SCALE)]
        ys = [xs[0]]
        for i, conv in enumerate(self.scale_convs, start=1):
            ys.append(conv(F.add(xs[i], ys[-1]) if i > 1 else xs[i]))
        y = self.conv_out(F.concat_channels(ys))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(F.add(y, skip))


class Stem(Module):
    """7x7 stride-2 conv, BN, ReLU, 3x3 stride-2 max-pool (overall /4)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = Conv2d(cin, cout, 7, stride=2, padding=3, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(F.relu(self.bn(self.conv(x))), 3, 2, 1)


class CNNEncoder(Module):
    def __init__(self, in_channels: int = 3, stem_channels: int = 16,
                 stage_channels: Sequence[int] = (16, 32, 64, 128),
                 stage_depths: Sequence[int] = (1, 1, 1, 1)):
        super().__init__()
        if len(stage_channels) != 4 or len(stage_depths) != 4:
            raise ValueError("CNNEncoder needs exactly four stages")
        self.stem = Stem(in_channels, stem_channels)
        stages = []
        cin = stem_channels
        for idx, (c, depth) in enumerate(zip(stage_channels, stage_depths)):
            blocks = []
            for b in range(depth):
                stride = 2 if (idx > 0 and b == 0) else 1
                blocks.append(Res2Module(cin, c, stride))
                cin = c
            stages.append(ModuleList(blocks))
        self.stages = ModuleList(stages)

    def forward(self, image: Tensor) -> EncoderFeatures:
        _, _, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w}: height and width must be multiples of 32")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            for block in stage:
                x = block(x)
            feats.append(x)
        return EncoderFeatures(*feats)
