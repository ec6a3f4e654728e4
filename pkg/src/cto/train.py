"""Adam, the training loop, evaluation and prediction helpers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import save_checkpoint
from .config import RunConfig, model_config_from_lines, model_config_lines
from .data import Dataset, kfold_split
from .engine import ComputationRecord, Tensor, backward, no_grad, use_record
from .engine import functional as F
from .losses import total_loss
from .metrics import aggregate, logits_to_labels, per_image_metrics
from .model import CTO, ModelConfig, build
from .rng import derive_rng

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Loss became non-finite; ``diagnostic`` describes the batch."""

    def __init__(self, msg: str, diagnostic: dict):
        super().__init__(msg)
        self.diagnostic = diagnostic


class Adam:
    def __init__(self, named_params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(named_params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_arrays(self) -> dict:
        out = {"step": np.array(self.t, dtype=np.int64)}
        for n in self.m:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        if not arrays:
            return
        self.t = int(arrays["step"])
        for n in self.m:
            self.m[n][...] = arrays[f"m.{n}"]
            self.v[n][...] = arrays[f"v.{n}"]


def batches(indices, batch_size: int) -> list:
    """Split into near-equal chunks of at most ``batch_size``."""
    indices = list(indices)
    if not indices:
        return []
    n_chunks = math.ceil(len(indices) / batch_size)
    return [list(c) for c in np.array_split(np.array(indices), n_chunks)]


def predict_logits(model: CTO, images: np.ndarray):
    """Eval-mode forward on a numpy batch; returns numpy ``(seg, boundary)``."""
    model.eval()
    with no_grad():
        out = model(Tensor(images.astype(_param_dtype(model))))
    bnd = out.boundary_logits.data if out.boundary_logits is not None else None
    return out.seg_logits[-1].data, bnd


def _param_dtype(model: CTO):
    return model.parameters()[0].data.dtype


def evaluate(model: CTO, dataset: Dataset, indices, batch_size: int = 16) -> dict:
    """Dice / IoU / average HD of the finest decoder level over ``indices``."""
    records = []
    k = model.cfg.num_classes
    for chunk in batches(indices, batch_size):
        images, masks, _ = dataset.batch(chunk)
        seg, _ = predict_logits(model, images)
        pred = logits_to_labels(seg)
        for p, m in zip(pred, masks):
            records.append(per_image_metrics(p, m, k))
    return aggregate(records)


def summary(metrics: dict) -> dict:
    return {k: metrics[k] for k in ("dice", "iou", "avg_hd", "n_images")}


@dataclass
class TrainResult:
    model: CTO
    best_epoch: int
    best_val: dict
    history: list = field(default_factory=list)


def checkpoint_meta(run: RunConfig, extra=()) -> list:
    return model_config_lines(run.model) + list(extra)


def model_config_from_meta(meta) -> ModelConfig:
    return model_config_from_lines([m for m in meta if m.startswith(("model.", "vit."))])


def train_model(
    run: RunConfig,
    dataset: Dataset,
    train_idx,
    val_idx,
    metrics_path: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
) -> TrainResult:
    """Train one model; keeps the best-validation-Dice weights.

    Writes one JSON line per epoch to ``metrics_path`` and the best
    checkpoint to ``checkpoint_path`` when given. The returned model holds
    the best weights.
    """
    model = build(run.model)
    opt = Adam(model.named_parameters(), run.optim.lr, run.optim.betas, run.optim.eps)
    seed = run.train.seed
    best, best_epoch, best_state = None, 0, None
    history = []
    record = ComputationRecord()
    fh = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(1, run.train.epochs + 1):
            order = derive_rng(seed, "shuffle", epoch).permutation(np.array(train_idx))
            aug_rng = derive_rng(seed, "augment", epoch) if run.train.augment else None
            sums = {}
            nb = 0
            for chunk in batches(order, run.train.batch_size):
                images, masks, bnd = dataset.batch(chunk, aug_rng)
                model.train()
                opt.zero_grad()
                with use_record(record):
                    out = model(Tensor(images.astype(_param_dtype(model))))
                    loss, terms = total_loss(out, masks, bnd, run.loss)
                    if not math.isfinite(terms["total"]):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch}",
                            {"epoch": epoch, "batch_ids": [dataset[i].id for i in chunk],
                             "terms": terms},
                        )
                    backward(loss, record)
                opt.step()
                for key, val in terms.items():
                    sums[key] = sums.get(key, 0.0) + val
                nb += 1
            line = {"epoch": epoch, "total_loss": sums["total"] / nb,
                    "terms": {k: v / nb for k, v in sums.items() if k != "total"}}
            val = evaluate(model, dataset, val_idx, run.train.eval_batch_size)
            line["val"] = summary(val)
            if run.train.eval_train:
                line["train"] = summary(evaluate(model, dataset, train_idx, run.train.eval_batch_size))
            history.append(line)
            if fh is not None:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
                fh.flush()
            log.info("epoch %d loss %.4f val dice %.4f", epoch, line["total_loss"], val["dice"])
            if best is None or val["dice"] > best["dice"]:
                best, best_epoch = val, epoch
                best_state = {k: v.copy() for k, v in model.state().items()}
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, opt,
                                    checkpoint_meta(run, [f"epoch={epoch}"]))
    finally:
        if fh is not None:
            fh.close()
    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(model, best_epoch, best, history)


def fold_indices(run: RunConfig, n: int) -> list:
    """``[(fold_id, train_idx, val_idx), ...]`` for the configured fold(s)."""
    folds = kfold_split(n, run.train.folds, run.train.seed)
    ids = range(run.train.folds) if run.train.fold == "all" else [int(run.train.fold)]
    out = []
    for f in ids:
        train = sorted(i for j, fold in enumerate(folds) if j != f for i in fold)
        out.append((f, train, folds[f]))
    return out


def load_model(checkpoint, expected: Optional[ModelConfig] = None) -> CTO:
    """Rebuild the model stored in ``checkpoint``.

    Raises ``ValueError`` if ``expected`` disagrees on the class count.
    """
    from .checkpoint import load_arrays

    arrays, meta = load_arrays(checkpoint)
    cfg = model_config_from_meta(meta)
    if expected is not None and expected.num_classes != cfg.num_classes:
        raise ValueError(
            f"checkpoint has num_classes={cfg.num_classes}, config says {expected.num_classes}"
        )
    model = build(cfg)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    return model.eval()


def reflect_pad_to(image: np.ndarray, multiple: int = 32):
    """Reflection-pad ``(3, H, W)`` to multiples of ``multiple``; returns (padded, (top, left))."""
    _, h, w = image.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    top, left = ph // 2, pw // 2
    if ph == 0 and pw == 0:
        return image, (0, 0)
    padded = F.pad2d(Tensor(image[None]), (top, ph - top, left, pw - left), "reflect").data[0]
    return padded, (top, left)
