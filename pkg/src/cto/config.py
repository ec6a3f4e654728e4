"""Run configuration in a flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    model.stage_channels = 16, 32, 64, 128
    vit.rates = 2, 4, 8, 16
    optim.lr = 0.002
    train.fold = all

Sections: ``model``, ``vit`` (the stitch-attention settings of the model),
``loss``, ``optim``, ``train``, ``data``, ``synth``. Sequences are
comma-separated; booleans are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

from .data import SynthSpec
from .losses import LossConfig
from .model import ModelConfig
from .stitchvit import StitchConfig


class ConfigParseError(ValueError):
    def __init__(self, msg: str, lineno: int = 0, path=None):
        loc = f"{path or '<config>'}:{lineno}: " if lineno else ""
        super().__init__(loc + msg)
        self.lineno = lineno


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 90
    folds: int = 5
    fold: str = "0"  # a fold index, or "all" for k-fold cross-validation
    augment: bool = True
    eval_batch_size: int = 16
    eval_train: bool = True
    seed: int = 0


@dataclass
class DataConfig:
    dir: str = "data"
    num_classes_check: bool = True


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    output: OutputConfig = field(default_factory=OutputConfig)

    def sections(self) -> dict:
        return {
            "model": self.model, "vit": self.model.vit, "loss": self.loss,
            "optim": self.optim, "train": self.train, "data": self.data,
            "synth": self.synth, "output": self.output,
        }

    def validate(self) -> list:
        errs = self.model.validate() + self.loss.validate()
        if not self.optim.lr > 0:
            errs.append("optim.lr must be > 0")
        if self.optim.kind != "adam":
            errs.append("optim.kind must be 'adam'")
        if self.train.batch_size < 1:
            errs.append("train.batch_size must be >= 1")
        if self.train.fold != "all":
            try:
                f = int(self.train.fold)
            except ValueError:
                errs.append("train.fold must be an integer or 'all'")
            else:
                if not 0 <= f < self.train.folds:
                    errs.append(f"train.fold {f} outside [0, {self.train.folds})")
        expected_mode = "binary" if self.model.num_classes == 1 else "multiclass"
        if self.loss.class_mode != expected_mode:
            errs.append(f"loss.class_mode must be {expected_mode!r} for num_classes={self.model.num_classes}")
        return errs

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.output.dir) / "model.ckpt"

    @property
    def metrics_path(self) -> Path:
        return Path(self.output.dir) / "metrics.jsonl"


_SKIP = {("model", "vit")}


def _hints(obj) -> dict:
    return typing.get_type_hints(type(obj))


def _parse_value(text: str, tp):
    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        args = typing.get_args(tp)
        elem = args[0] if args else str
        items = [t.strip() for t in text.split(",") if t.strip()]
        vals = [_parse_value(t, elem) for t in items]
        if origin is tuple and args and args[-1] is not Ellipsis and len(args) != len(vals):
            raise ValueError(f"expected {len(args)} comma-separated values")
        return tuple(vals) if origin is tuple else list(vals)
    if tp is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, path=None) -> RunConfig:
    cfg = RunConfig()
    sections = cfg.sections()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'section.key = value', got {raw.strip()!r}", lineno, path)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        section, dot, name = key.partition(".")
        if not dot or section not in sections:
            raise ConfigParseError(f"unknown section in key {key!r}", lineno, path)
        target = sections[section]
        hints = _hints(target)
        if name not in hints or (section, name) in _SKIP:
            raise ConfigParseError(f"unknown key {key!r}", lineno, path)
        try:
            setattr(target, name, _parse_value(value, hints[name]))
        except ValueError as exc:
            raise ConfigParseError(f"{key}: {exc}", lineno, path) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc}", 0, path) from None
    return parse_config(text, path)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, obj in cfg.sections().items():
        for f in dataclasses.fields(obj):
            if (section, f.name) in _SKIP:
                continue
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def model_config_lines(model: ModelConfig) -> list:
    """Model section lines (used to stamp checkpoints)."""
    run = RunConfig(model=model)
    return [ln for ln in dump_config(run).splitlines() if ln.startswith(("model.", "vit."))]


def model_config_from_lines(lines) -> ModelConfig:
    return parse_config("\n".join(lines)).model


__all__ = [
    "ConfigParseError", "DataConfig", "OptimConfig", "OutputConfig", "RunConfig",
    "StitchConfig", "TrainConfig", "dump_config", "load_config", "model_config_from_lines",
    "model_config_lines", "parse_config",
]
