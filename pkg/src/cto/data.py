"""Synthetic lesion corpus, PPM/PGM I/O, dataset loading and k-fold splits.

On-disk layout of a corpus directory::

    manifest.tsv   "# key=value" header lines, then id<TAB>image<TAB>mask rows
    spec.txt       the generating SynthSpec as key=value lines
    images/<id>.ppm  binary PPM (P6, maxval 255)
    masks/<id>.pgm   binary PGM (P5, maxval 255), gray level = class label

PNM header grammar accepted by the reader: magic ``P5`` or ``P6``, then
width, height and maxval as ASCII decimals separated by whitespace, with
``#`` comments running to end of line allowed between tokens; exactly one
whitespace byte follows maxval, then the raster (one byte per sample,
``maxval <= 255``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .metrics import boundary_gt, downsample_boundary
from .rng import derive_rng


class DataError(Exception):
    """Malformed or inconsistent data on disk."""


class PNMError(DataError):
    def __init__(self, msg: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{msg} (byte offset {offset})")
        self.offset = offset


# ------------------------------------------------------------------ PPM/PGM

def write_pnm(path, arr: np.ndarray) -> None:
    """Write ``(H, W)`` as P5 or ``(H, W, 3)`` as P6; values must fit uint8."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError("write_pnm expects uint8 data")
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def parse_pnm(buf: bytes, path=None) -> np.ndarray:
    """Decode a binary P5/P6 byte string to ``(H, W)`` or ``(H, W, 3)`` uint8."""
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise PNMError("bad magic number, expected P5 or P6", 0, path)
    channels = 1 if buf[:2] == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise PNMError("header ends early", pos, path)
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append((int(buf[start:pos]), start))
        else:
            raise PNMError(f"unexpected byte {c!r} in header", pos, path)
    (w, _), (h, _), (maxval, moff) = fields
    if w < 1 or h < 1:
        raise PNMError("zero image dimension", fields[0][1], path)
    if not 1 <= maxval <= 255:
        raise PNMError(f"unsupported maxval {maxval}", moff, path)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PNMError("missing whitespace after maxval", pos, path)
    pos += 1
    need = w * h * channels
    if len(buf) - pos < need:
        raise PNMError(f"raster truncated: need {need} bytes, have {len(buf) - pos}", len(buf), path)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape((h, w) if channels == 1 else (h, w, 3)).copy()


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read(), path)


# --------------------------------------------------------------- synthesis

@dataclass
class SynthSpec:
    n_images: int = 200
    size: Tuple[int, int] = (64, 64)
    shapes_per_image: Tuple[int, int] = (1, 1)
    kinds: Tuple[str, ...] = ("ellipse", "blob")
    radius_range: Tuple[float, float] = (0.16, 0.34)  # semi-axes, fraction of min(H, W)
    fg_mean: Tuple[float, ...] = (0.40, 0.25, 0.20)
    bg_mean: Tuple[float, ...] = (0.80, 0.65, 0.55)
    color_jitter: float = 0.08
    noise_sigma: float = 0.04
    texture_amp: float = 0.05
    supersample: int = 4
    seed: int = 0

    def validate(self) -> list:
        errs = []
        h, w = self.size
        if h % 32 or w % 32:
            errs.append(f"synth.size {h}x{w} must be multiples of 32")
        if self.n_images < 1:
            errs.append("synth.n_images must be >= 1")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            errs.append("synth.shapes_per_image must be an ordered range")
        if not set(self.kinds) <= {"ellipse", "blob"} or not self.kinds:
            errs.append("synth.kinds must be drawn from {ellipse, blob}")
        return errs

    def to_lines(self) -> list:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name}={v}")
        return out

    def spec_hash(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()[:16]


@dataclass
class Shape:
    kind: str
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction, pixels
    b: float
    theta: float
    harmonics: Tuple[Tuple[int, float, float], ...] = ()  # (k, amplitude, phase)


def _draw_shape(rng, spec: SynthSpec, h: int, w: int) -> Shape:
    kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
    m = min(h, w)
    a = rng.uniform(*spec.radius_range) * m
    b = rng.uniform(*spec.radius_range) * m
    theta = rng.uniform(0, math.pi)
    harm = ()
    if kind == "blob":
        harm = tuple(
            (k, float(rng.uniform(0.03, 0.12)), float(rng.uniform(0, 2 * math.pi)))
            for k in (2, 3, 4)
        )
    reach = max(a, b) * (1 + sum(x[1] for x in harm)) + 1
    cy = rng.uniform(min(reach, h / 2), max(h - reach, h / 2))
    cx = rng.uniform(min(reach, w / 2), max(w - reach, w / 2))
    return Shape(kind, float(cy), float(cx), float(a), float(b), float(theta), harm)


def coverage(shape: Shape, h: int, w: int, ss: int = 4) -> np.ndarray:
    """Fraction of each pixel inside ``shape`` from an ``ss x ss`` sub-grid.

    Pixel ``(i, j)`` spans ``[i, i+1) x [j, j+1)``; the shape boundary is the
    ellipse radius scaled by ``1 + sum amp * sin(k phi + phase)``.
    """
    off = (np.arange(ss) + 0.5) / ss
    ys = (np.arange(h)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + off[None, :]).reshape(-1)
    dy = ys[:, None] - shape.cy
    dx = xs[None, :] - shape.cx
    c, s = math.cos(shape.theta), math.sin(shape.theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    r = np.sqrt((u / shape.a) ** 2 + (v / shape.b) ** 2)
    limit = 1.0
    if shape.harmonics:
        phi = np.arctan2(v / shape.b, u / shape.a)
        limit = 1.0 + sum(amp * np.sin(k * phi + ph) for k, amp, ph in shape.harmonics)
    inside = (r <= limit).astype(np.float64)
    return inside.reshape(h, ss, w, ss).mean(axis=(1, 3))


def render_sample(spec: SynthSpec, index: int):
    """Deterministically render sample ``index``.

    Returns ``(image_u8 (H, W, 3), mask_u8 (H, W), shapes)``.
    """
    h, w = spec.size
    rng = derive_rng(spec.seed, "synth", index)
    n_shapes = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
    bg = np.clip(np.array(spec.bg_mean) + rng.normal(0, spec.color_jitter, 3), 0, 1)
    fg = np.clip(np.array(spec.fg_mean) + rng.normal(0, spec.color_jitter, 3), 0, 1)
    yy, xx = np.mgrid[0:h, 0:w]
    fy, fx, ph = rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25), rng.uniform(0, 2 * math.pi, 2)
    texture = spec.texture_amp * np.sin(fy * yy + ph[0]) * np.cos(fx * xx + ph[1])
    cov = np.zeros((h, w))
    shapes = []
    for _ in range(n_shapes):
        shp = _draw_shape(rng, spec, h, w)
        shapes.append(shp)
        cov = np.maximum(cov, coverage(shp, h, w, spec.supersample))
    img = bg[None, None, :] * (1 - cov[..., None]) + fg[None, None, :] * cov[..., None]
    img = img + texture[..., None]
    if spec.noise_sigma > 0:
        img = img + rng.normal(0, spec.noise_sigma, img.shape)
    img_u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    mask = (cov >= 0.5).astype(np.uint8)
    return img_u8, mask, shapes


def synth_generate(spec: SynthSpec, out_dir) -> Path:
    """Write a corpus to ``out_dir``; returns the manifest path."""
    errs = spec.validate()
    if errs:
        raise ValueError("; ".join(errs))
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise DataError(f"{out} is not writable")
    rows = []
    for i in range(spec.n_images):
        img, mask, _ = render_sample(spec, i)
        sid = f"s{i:05d}"
        write_pnm(out / "images" / f"{sid}.ppm", img)
        write_pnm(out / "masks" / f"{sid}.pgm", mask)
        rows.append(f"{sid}\timages/{sid}.ppm\tmasks/{sid}.pgm")
    (out / "spec.txt").write_text("\n".join(spec.to_lines()) + "\n")
    manifest = out / "manifest.tsv"
    header = [f"# seed={spec.seed}", f"# spec_hash={spec.spec_hash()}"]
    manifest.write_text("\n".join(header + rows) + "\n")
    return manifest


# ------------------------------------------------------------------ loading

class Sample:
    def __init__(self, sid: str, image: np.ndarray, mask: np.ndarray):
        self.id = sid
        self.image = image  # (3, H, W) float32 in [0, 1]
        self.mask = mask  # (H, W) int64 labels
        self._boundary = None

    @property
    def boundary(self) -> np.ndarray:
        if self._boundary is None:
            self._boundary = boundary_gt(self.mask > 0)
        return self._boundary


def sample_from_arrays(sid: str, img_u8: np.ndarray, mask_u8: np.ndarray) -> Sample:
    image = (img_u8.astype(np.float32) / np.float32(255)).transpose(2, 0, 1).copy()
    return Sample(sid, image, mask_u8.astype(np.int64))


class Dataset:
    def __init__(self, samples: List[Sample]):
        self.samples = list(samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def check_labels(self, num_classes: int) -> None:
        for s in self.samples:
            top = int(s.mask.max(initial=0))
            if top >= max(num_classes, 2):
                raise DataError(f"sample {s.id}: label {top} >= num_classes {num_classes}")

    def batch(self, indices, augment_rng: Optional[np.random.Generator] = None):
        """Stack samples -> ``(images, masks, boundary targets at 1/4 size)``."""
        imgs, masks, bnds = [], [], []
        for i in indices:
            s = self.samples[i]
            img, mask, bnd = s.image, s.mask, s.boundary
            if augment_rng is not None:
                img, mask, bnd = augment(img, mask, bnd, augment_rng)
            imgs.append(img)
            masks.append(mask)
            bnds.append(bnd)
        bnd = downsample_boundary(np.stack(bnds)[:, None], 4)
        return np.stack(imgs), np.stack(masks), bnd.astype(np.float32)


def augment(img, mask, bnd, rng):
    """Random horizontal/vertical flips and a multiple-of-90 rotation."""
    if rng.random() < 0.5:
        img, mask, bnd = img[:, :, ::-1], mask[:, ::-1], bnd[:, ::-1]
    if rng.random() < 0.5:
        img, mask, bnd = img[:, ::-1], mask[::-1], bnd[::-1]
    k = int(rng.integers(4))
    if k and img.shape[1] == img.shape[2]:
        img = np.rot90(img, k, axes=(1, 2))
        mask, bnd = np.rot90(mask, k), np.rot90(bnd, k)
    return np.ascontiguousarray(img), np.ascontiguousarray(mask), np.ascontiguousarray(bnd)


def read_manifest(path) -> Tuple[dict, list]:
    meta, rows = {}, []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected id<TAB>image<TAB>mask")
        rows.append(tuple(parts))
    return meta, rows


def load_pairs(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise DataError(f"no manifest.tsv in {directory}")
    _, rows = read_manifest(manifest)
    samples = []
    for sid, ipath, mpath in rows:
        img = read_pnm(directory / ipath)
        mask = read_pnm(directory / mpath)
        if img.ndim != 3:
            raise DataError(f"sample {sid}: image is not an RGB PPM")
        if mask.ndim != 2:
            raise DataError(f"sample {sid}: mask is not a gray PGM")
        if img.shape[:2] != mask.shape:
            raise DataError(f"sample {sid}: image {img.shape[:2]} and mask {mask.shape} differ in size")
        samples.append(sample_from_arrays(sid, img, mask))
    return Dataset(samples)


def generate_in_memory(spec: SynthSpec) -> Dataset:
    return Dataset([
        sample_from_arrays(f"s{i:05d}", *render_sample(spec, i)[:2]) for i in range(spec.n_images)
    ])


def kfold_split(n: int, k: int, seed: int) -> list:
    """Shuffle ``range(n)`` and cut it into ``k`` folds whose sizes differ by <= 1."""
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    perm = derive_rng(seed, "kfold").permutation(n)
    return [np.sort(f).tolist() for f in np.array_split(perm, k)]
