"""``cto`` command line: synth, train, eval, predict, gradcheck, flops, ablate.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numeric failure
(non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError
from .config import ConfigParseError, RunConfig, load_config
from .data import DataError, Dataset, load_pairs, read_pnm, synth_generate, write_pnm
from .engine import Tensor, precision
from .engine import functional as F
from .engine.gradcheck import finite_diff_check
from .flops import flops_report, format_report
from .losses import total_loss
from .metrics import boundary_gt, downsample_boundary, logits_to_labels, pooled
from .model import ConfigError, ablation_variants, build
from .train import (
    NumericError, evaluate, fold_indices, load_model, predict_logits, reflect_pad_to, train_model,
)

log = logging.getLogger("cto")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_dataset(run: RunConfig) -> Dataset:
    ds = load_pairs(run.data.dir)
    if run.data.num_classes_check:
        ds.check_labels(run.model.num_classes)
    return ds


def _fold_dirs(run: RunConfig, folds) -> dict:
    """Where each fold's checkpoint and metrics go."""
    base = Path(run.output.dir)
    if run.train.fold != "all":
        return {folds[0][0]: base}
    return {f: base / f"fold{f}" for f, _, _ in folds}


# ------------------------------------------------------------------ commands

def cmd_synth(run: RunConfig, args) -> int:
    manifest = synth_generate(run.synth, run.data.dir)
    print(manifest)
    return EXIT_OK


def _train_folds(run: RunConfig, ds: Dataset, out_dir: Path = None) -> dict:
    if out_dir is not None:
        run = dataclasses.replace(run, output=dataclasses.replace(run.output, dir=str(out_dir)))
    folds = fold_indices(run, len(ds))
    dirs = _fold_dirs(run, folds)
    blocks, results = [], []
    for f, train_idx, val_idx in folds:
        d = dirs[f]
        d.mkdir(parents=True, exist_ok=True)
        try:
            res = train_model(run, ds, train_idx, val_idx, d / "metrics.jsonl", d / "model.ckpt")
        except NumericError as exc:
            _write_json(d / "nan_diagnostic.json", exc.diagnostic)
            raise
        val = evaluate(res.model, ds, val_idx, run.train.eval_batch_size)
        val["fold"] = f
        val["best_epoch"] = res.best_epoch
        _write_json(d / "val.json", val)
        blocks.append(val)
        results.append(res)
    report = {"folds": blocks}
    if len(blocks) > 1:
        report["pooled"] = pooled(blocks)
    return {"report": report, "results": results}


def cmd_train(run: RunConfig, args) -> int:
    ds = _load_dataset(run)
    out = _train_folds(run, ds)
    _write_json(Path(run.output.dir) / "train_summary.json", out["report"])
    print(json.dumps(out["report"], sort_keys=True))
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    ds = _load_dataset(run)
    folds = fold_indices(run, len(ds))
    if args.checkpoint:
        ckpts = {f: Path(args.checkpoint) for f, _, _ in folds}
    else:
        ckpts = {f: d / "model.ckpt" for f, d in _fold_dirs(run, folds).items()}
    blocks = []
    for f, _, val_idx in folds:
        model = load_model(ckpts[f], run.model)
        block = evaluate(model, ds, val_idx, run.train.eval_batch_size)
        block["fold"] = f
        blocks.append(block)
    report = blocks[0] if len(blocks) == 1 else {"folds": blocks, "pooled": pooled(blocks)}
    _write_json(Path(run.output.dir) / "eval.json", report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_predict(run: RunConfig, args) -> int:
    if not args.image:
        raise UsageError("predict needs --image")
    ckpt = Path(args.checkpoint) if args.checkpoint else run.checkpoint_path
    img = read_pnm(args.image)
    if img.ndim != 3:
        raise DataError(f"{args.image}: expected an RGB PPM image")
    model = load_model(ckpt, run.model)
    x = (img.astype(np.float32) / np.float32(255)).transpose(2, 0, 1)
    h, w = x.shape[1:]
    padded, (top, left) = reflect_pad_to(x, 32)
    seg, bnd = predict_logits(model, padded[None])
    mask = logits_to_labels(seg)[0, top:top + h, left:left + w]
    out_dir = Path(args.out or run.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    write_pnm(out_dir / f"{stem}_mask.pgm", mask.astype(np.uint8))
    written = [out_dir / f"{stem}_mask.pgm"]
    if bnd is not None:
        ph, pw = padded.shape[1:]
        prob = F.sigmoid(F.upsample_bilinear(Tensor(bnd), ph, pw)).data[0, 0]
        gray = np.round(prob[top:top + h, left:left + w] * 255).astype(np.uint8)
        write_pnm(out_dir / f"{stem}_boundary.pgm", gray)
        written.append(out_dir / f"{stem}_boundary.pgm")
    for p in written:
        print(p)
    return EXIT_OK


def gradcheck_model(run: RunConfig, coords_per_param: int = 2, fault_scale=None,
                    fault_param=None, size: int = 32, batch: int = 1):
    """Finite-difference check of the full loss w.r.t. every model parameter.

    The model runs in eval mode (frozen normalization statistics) on a
    fixed random batch with a disc-shaped target.
    """
    with precision(np.float64):
        model = build(dataclasses.replace(run.model, input_size=(size, size)))
        model.to(np.float64).eval()
        rng = np.random.default_rng(run.train.seed)
        x = Tensor(rng.random((batch, run.model.in_channels, size, size)))
        yy, xx = np.mgrid[:size, :size]
        disc = ((yy - size / 2 + 0.5) ** 2 + (xx - size / 2 - 0.5) ** 2) < (size / 3.5) ** 2
        y = np.repeat(disc[None].astype(np.int64), batch, axis=0)
        bnd = downsample_boundary(boundary_gt(disc)[None, None], 4).repeat(batch, axis=0)

        def loss():
            return total_loss(model(x), y, bnd.astype(np.float64), run.loss)[0]

        return finite_diff_check(loss, model.parameters(), coords_per_param=coords_per_param,
                                 seed=run.train.seed, fault_scale=fault_scale,
                                 fault_param=fault_param)


def cmd_gradcheck(run: RunConfig, args) -> int:
    fault = 2.0 if args.inject_fault else None
    report = gradcheck_model(run, args.coords, fault_scale=fault, fault_param=args.fault_param)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_flops(run: RunConfig, args) -> int:
    model = build(run.model)
    h, w = run.model.input_size
    report = flops_report(model, (1, run.model.in_channels, h, w), run.model.vit.embed_dim,
                          run.model.vit.rates)
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        sys.stdout.write(format_report(report))
    return EXIT_OK


ABLATION_COLUMNS = ("variant", "cnn", "vit", "cbm", "bem", "bim", "config_hash", "params",
                    "dice", "iou", "avg_hd", "d_dice", "d_iou", "d_avg_hd")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else "undefined"
    return str(v)


def run_ablation(run: RunConfig, ds: Dataset) -> list:
    """Train every variant on the same folds and seeds; returns table rows."""
    rows = []
    for name, mcfg in ablation_variants(run.model):
        vrun = dataclasses.replace(run, model=mcfg)
        out = _train_folds(vrun, ds, Path(run.output.dir) / "ablation" / name)
        rep = out["report"]
        summ = rep.get("pooled", rep["folds"][0])
        rows.append({
            "variant": name, "cnn": mcfg.use_cnn, "vit": mcfg.use_vit,
            "cbm": mcfg.boundary == "cbm", "bem": mcfg.boundary == "sobel", "bim": mcfg.use_bim,
            "config_hash": mcfg.config_hash(), "params": build(mcfg).num_parameters(),
            "dice": summ["dice"], "iou": summ["iou"], "avg_hd": summ["avg_hd"],
        })
    base = rows[0]
    for r in rows:
        for key in ("dice", "iou", "avg_hd"):
            a, b = r[key], base[key]
            ok = isinstance(a, float) and isinstance(b, float)
            r["d_" + key] = a - b if ok else "undefined"
    return rows


def format_ablation(rows) -> str:
    lines = ["\t".join(ABLATION_COLUMNS)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in ABLATION_COLUMNS))
    return "\n".join(lines) + "\n"


def cmd_ablate(run: RunConfig, args) -> int:
    ds = _load_dataset(run)
    text = format_ablation(run_ablation(run, ds))
    path = Path(run.output.dir) / "ablation.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "flops": cmd_flops, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cto", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run config (section.key = value lines)")
    p.add_argument("--checkpoint", help="checkpoint path (eval/predict)")
    p.add_argument("--deterministic", action="store_true", help="pin BLAS to one thread")
    p.add_argument("--image", help="PPM image (predict)")
    p.add_argument("--out", help="output directory (predict)")
    p.add_argument("--inject-fault", action="store_true", help="gradcheck: scale one gradient by 2")
    p.add_argument("--fault-param", help="gradcheck: parameter to corrupt (default: first)")
    p.add_argument("--coords", type=int, default=2, help="gradcheck: coordinates per parameter")
    p.add_argument("--json", action="store_true", help="flops: print JSON instead of a table")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _thread_limit(deterministic: bool):
    if deterministic:
        return threadpool_limits(1)
    env = os.environ.get("CTO_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"CTO_THREADS must be an integer, got {env!r}") from None
        return threadpool_limits(n)
    return contextlib.nullcontext()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_config(args.config)
        errs = run.validate()
        if errs:
            raise ConfigError(errs)
        with _thread_limit(args.deterministic):
            return COMMANDS[args.command](run, args)
    except (UsageError, ConfigParseError, ConfigError) as exc:
        print(f"cto: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"cto: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"cto: numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.diagnostic, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
