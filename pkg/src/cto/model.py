"""Dual-stream encoder + boundary-guided decoder with deep supervision."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

from .boundary import BoundaryExtractor, BoundaryInjection, PlainDecoderBlock
from .cnn import CNNEncoder
from .engine import ShapeError, Tensor
from .engine import functional as F
from .nn import Conv2d, ConvBNReLU, Module, ModuleList, init_parameters
from .stitchvit import StitchConfig, StitchViT

LEVELS = 3
BOUNDARY_KINDS = ("sobel", "cbm", "none")


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config: " + "; ".join(self.violations))


@dataclass
class ModelConfig:
    in_channels: int = 3
    stem_channels: int = 16
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: Tuple[int, ...] = (1, 1, 1, 1)
    vit: StitchConfig = field(default_factory=StitchConfig)
    bottleneck_channels: int = 64
    boundary_channels: int = 16
    decoder_channels: Tuple[int, ...] = (64, 32, 16)
    num_classes: int = 2
    levels: int = LEVELS
    input_size: Tuple[int, int] = (64, 64)
    seed: int = 0
    use_cnn: bool = True
    use_vit: bool = True
    boundary: str = "sobel"
    use_bim: bool = True

    def validate(self) -> list:
        errs = []
        if self.levels != LEVELS:
            errs.append(f"model.levels must be {LEVELS}, got {self.levels}")
        if self.num_classes < 1:
            errs.append("model.num_classes must be >= 1")
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            errs.append("model.stage_channels and model.stage_depths need four entries")
        if any(c % 4 for c in self.stage_channels):
            errs.append(f"model.stage_channels must be multiples of 4, got {self.stage_channels}")
        if len(self.decoder_channels) != LEVELS:
            errs.append(f"model.decoder_channels needs {LEVELS} entries")
        h, w = self.input_size
        if h % 32 or w % 32:
            errs.append(f"model.input_size {h}x{w} must be multiples of 32")
        if not (self.use_cnn or self.use_vit):
            errs.append("at least one of model.use_cnn / model.use_vit must be set")
        if self.boundary not in BOUNDARY_KINDS:
            errs.append(f"model.boundary must be one of {BOUNDARY_KINDS}")
        if self.boundary != "none" and not self.use_cnn:
            errs.append("boundary extraction reads CNN features; needs model.use_cnn")
        if self.use_bim and self.boundary == "none":
            errs.append("model.use_bim needs a boundary module")
        if self.use_vit:
            errs.extend(self.vit.validate())
        return errs

    @property
    def out_channels(self) -> int:
        return 1 if self.num_classes == 1 else self.num_classes

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ModelOutputs(NamedTuple):
    seg_logits: List[Tensor]  # one per decoder level, each (N, K, H, W)
    boundary_logits: Optional[Tensor]  # (N, 1, H/4, W/4), None without a boundary module


class CTO(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        dec = list(cfg.decoder_channels)
        if cfg.use_cnn:
            self.cnn = CNNEncoder(cfg.in_channels, cfg.stem_channels,
                                  cfg.stage_channels, cfg.stage_depths)
            skip_ch = list(cfg.stage_channels)
        else:
            self.cnn = None
        if cfg.use_vit:
            if cfg.use_cnn:
                vit_out = cfg.stage_channels[3]
                self.vit = StitchViT(cfg.vit, vit_out, cfg.in_channels)
                deep = cfg.stage_channels[3] + vit_out
            else:
                # the pyramid doubles as encoder skips
                self.vit = StitchViT(cfg.vit, cfg.stage_channels[3], cfg.in_channels,
                                     pyramid_channels=cfg.stage_channels[1:3])
                skip_ch = [cfg.vit.embed_dim] + list(cfg.stage_channels[1:])
                deep = cfg.stage_channels[3]
        else:
            self.vit = None
            deep = cfg.stage_channels[3]
        self.bottleneck = ConvBNReLU(deep, cfg.bottleneck_channels)
        if cfg.boundary != "none":
            self.bem = BoundaryExtractor(skip_ch[0], skip_ch[3], cfg.boundary_channels,
                                         learned=(cfg.boundary == "cbm"))
        else:
            self.bem = None
        blocks, projs, heads = [], [], []
        prev = cfg.bottleneck_channels
        for j in range(LEVELS):
            skip = skip_ch[2 - j]
            if cfg.use_bim:
                projs.append(Conv2d(cfg.boundary_channels, cfg.boundary_channels, 1))
                blocks.append(BoundaryInjection(cfg.boundary_channels, skip, prev, dec[j]))
            else:
                blocks.append(PlainDecoderBlock(skip, prev, dec[j]))
            heads.append(Conv2d(dec[j], cfg.out_channels, 1))
            prev = dec[j]
        self.decoder = ModuleList(blocks)
        self.fb_proj = ModuleList(projs) if projs else None
        self.heads = ModuleList(heads)

    def encode(self, image: Tensor):
        """Returns ``(skips f1..f3, bottleneck input f4, deep fused feature)``."""
        if self.cnn is not None:
            f1, f2, f3, f4 = self.cnn(image)
            deep = f4 if self.vit is None else F.concat_channels([f4, self.vit(image)])
        else:
            f1, f2, f3, f4 = self.vit.forward_pyramid(image)
            deep = f4
        return (f1, f2, f3, f4), deep

    def forward(self, image: Tensor) -> ModelOutputs:
        n, _, h, w = image.shape
        if h % 32 or w % 32:
            raise ShapeError(f"input {h}x{w}: height and width must be multiples of 32")
        if image.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected {self.cfg.in_channels} input channels, got {image.shape[1]}")
        (f1, f2, f3, f4), deep = self.encode(image)
        prev = self.bottleneck(deep)
        bundle = self.bem(f1, f4) if self.bem is not None else None
        seg = []
        for j, skip in enumerate((f3, f2, f1)):
            sh, sw = skip.shape[2:]
            up = F.upsample_bilinear(prev, sh, sw)
            if self.cfg.use_bim:
                fb = self.fb_proj[j](F.upsample_bilinear(bundle.features, sh, sw))
                prev = self.decoder[j](fb, skip, up)
            else:
                prev = self.decoder[j](skip, up)
            seg.append(F.upsample_bilinear(self.heads[j](prev), h, w))
        return ModelOutputs(seg, bundle.logits if bundle is not None else None)


def build(cfg: ModelConfig) -> CTO:
    """Validate, construct and deterministically initialize a model."""
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    model = CTO(cfg)
    init_parameters(model, cfg.seed)
    return model


ABLATIONS = (
    ("cnn_only", dict(use_cnn=True, use_vit=False, boundary="none", use_bim=False)),
    ("vit_only", dict(use_cnn=False, use_vit=True, boundary="none", use_bim=False)),
    ("dual", dict(use_cnn=True, use_vit=True, boundary="none", use_bim=False)),
    ("dual+cbm", dict(use_cnn=True, use_vit=True, boundary="cbm", use_bim=False)),
    ("dual+bem", dict(use_cnn=True, use_vit=True, boundary="sobel", use_bim=False)),
    ("dual+bem+bim", dict(use_cnn=True, use_vit=True, boundary="sobel", use_bim=True)),
)


def ablation_variants(cfg: ModelConfig) -> list:
    """The six component combinations, as ``(name, ModelConfig)`` pairs."""
    return [(name, dataclasses.replace(cfg, **flags)) for name, flags in ABLATIONS]


def module_parameter_counts(model: CTO) -> dict:
    counts = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.size
    return counts
