"""Multiply-accumulate accounting: closed-form counts checked against the counter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, count_macs, mac_tag, no_grad
from .engine.functional import conv_output_size
from .nn import Conv2d, Module
from .stitchvit import count_attention_macs


def conv_macs(n: int, cout: int, cin: int, groups: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return n * cout * (cin // groups) * kh * kw * ho * wo


@dataclass
class ConvRow:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    in_hw: tuple
    out_hw: tuple
    analytic: int
    measured: int


def _named_modules(module: Module, prefix: str = ""):
    yield prefix, module
    for key, child in module.children():
        yield from _named_modules(child, f"{prefix}.{key}" if prefix else key)


def conv_mac_table(model: Module, input_shape) -> tuple:
    """Per-layer conv MACs for one forward pass of ``model``.

    Returns ``(rows, counter)``. Each :class:`Conv2d` runs under its own
    counter tag, so ``measured`` is the instrumented figure for exactly that
    layer while ``analytic`` comes from its shapes.
    """
    rows = {}
    patched = []
    for name, mod in _named_modules(model):
        if not isinstance(mod, Conv2d):
            continue

        def wrapped(x, _mod=mod, _name=name, _orig=mod.forward):
            n, cin, h, w = x.shape
            cout, _, kh, kw = _mod.weight.shape
            ho = conv_output_size(h, kh, _mod.stride, _mod.padding)
            wo = conv_output_size(w, kw, _mod.stride, _mod.padding)
            with mac_tag("conv:" + _name):
                out = _orig(x)
            macs = conv_macs(n, cout, cin, _mod.groups, kh, kw, ho, wo)
            if _name in rows:  # called more than once: accumulate
                rows[_name].analytic += macs
            else:
                rows[_name] = ConvRow(_name, cin, cout, kh, _mod.stride, (h, w), (ho, wo), macs, 0)
            return out

        mod.forward = wrapped
        patched.append(mod)
    was_training = model.training
    model.eval()
    try:
        dtype = model.parameters()[0].data.dtype
        with no_grad(), count_macs() as counter:
            model(Tensor(np.zeros(input_shape, dtype=dtype)))
    finally:
        for mod in patched:
            del mod.forward
        model.train(was_training)
    rows = list(rows.values())
    for r in rows:
        r.measured = counter["conv:" + r.name]
    return rows, counter


def component_totals(counter) -> dict:
    """Counter totals grouped by top-level component (``conv:cnn...`` -> ``cnn``)."""
    out = {}
    for tag, n in counter.by_tag.items():
        if tag.startswith("conv:"):
            key = tag[5:].split(".", 1)[0]
        elif tag.startswith("attn_"):
            key = "attention"
        else:
            key = "other"
        out[key] = out.get(key, 0) + n
    return dict(sorted(out.items()))


def flops_report(model: Module, input_shape, attn_channels: int, rates) -> dict:
    """Conv table, per-component totals and the dense-vs-stitched attention table."""
    rows, counter = conv_mac_table(model, input_shape)
    _, _, h, w = input_shape
    attn = count_attention_macs(h // 4, w // 4, attn_channels, [1] + [s for s in rates if s != 1])
    return {
        "input_shape": list(input_shape),
        "conv": [r.__dict__ for r in rows],
        "conv_all_match": all(r.analytic == r.measured for r in rows),
        "components": component_totals(counter),
        "total_macs": counter.total,
        "attention": attn,
    }


def format_report(report: dict) -> str:
    lines = ["# conv layers", "name\tcin\tcout\tk\tstride\tout_hw\tanalytic\tmeasured"]
    for r in report["conv"]:
        lines.append(f"{r['name']}\t{r['cin']}\t{r['cout']}\t{r['kernel']}\t{r['stride']}\t"
                     f"{r['out_hw'][0]}x{r['out_hw'][1]}\t{r['analytic']}\t{r['measured']}")
    lines.append("# components")
    for k, v in report["components"].items():
        lines.append(f"{k}\t{v}")
    lines.append(f"total\t{report['total_macs']}")
    att = report["attention"]
    lines.append(f"# token mixing (n={att['tokens']}, d={att['dim']}, dense={att['dense_macs']})")
    lines.append("rate\tanalytic\tmeasured\treduction")
    for r in att["stitched"]:
        lines.append(f"{r['rate']}\t{r['analytic']}\t{r['measured']}\t{r['reduction']:g}")
    return "\n".join(lines) + "\n"
