"""Checkpoint archive: a text manifest followed by raw little-endian buffers.

Layout::

    CTO-CHECKPOINT 1
    meta <text>                                  (zero or more)
    entry <name> <dtype> <shape> <offset> <nbytes>   (sorted by name)
    END
    <concatenated buffers>

``dtype`` is a numpy little-endian code (``<f4``, ``<f8``, ``<i8``), ``shape``
is comma-separated (``-`` for a scalar) and ``offset`` counts bytes from the
first byte after the ``END`` line. Optimizer moments, when stored, are
entries under ``optim.m.`` / ``optim.v.``.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = "CTO-CHECKPOINT"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_arrays(path, arrays: dict, meta: Optional[list] = None) -> None:
    names = sorted(arrays)
    header = [f"{MAGIC} {VERSION}"]
    for m in meta or []:
        if "\n" in m:
            raise ValueError("meta lines cannot contain newlines")
        header.append(f"meta {m}")
    blobs = []
    offset = 0
    for name in names:
        if any(c.isspace() for c in name):
            raise ValueError(f"entry name {name!r} contains whitespace")
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = np.ascontiguousarray(le).tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "-"
        header.append(f"entry {name} {le.dtype.str} {shape} {offset} {len(buf)}")
        blobs.append(buf)
        offset += len(buf)
    header.append("END")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_arrays(path):
    """Returns ``(arrays, meta_lines)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing END marker")
    lines = raw[:end].decode("utf-8").split("\n")
    body = raw[end + 5:]
    first = lines[0].split()
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {first[1]}")
    arrays, meta = {}, []
    expected_offset = 0
    for ln in lines[1:]:
        kind, _, rest = ln.partition(" ")
        if kind == "meta":
            meta.append(rest)
            continue
        if kind != "entry":
            raise CheckpointError(f"{path}: bad manifest line {ln!r}")
        name, dtype, shape, offset, nbytes = rest.split(" ")
        offset, nbytes = int(offset), int(nbytes)
        dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
        dt = np.dtype(dtype)
        if offset != expected_offset or nbytes != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointError(f"{path}: inconsistent offsets for {name}")
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: buffer for {name} truncated")
        arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
        arrays[name] = arr.reshape(dims).astype(dt.newbyteorder("="))
        expected_offset += nbytes
    return arrays, meta


def save_checkpoint(path, model, optimizer=None, meta: Optional[list] = None) -> None:
    arrays = dict(model.state())
    if optimizer is not None:
        for key, arr in optimizer.state_arrays().items():
            arrays[f"optim.{key}"] = arr
    save_arrays(path, arrays, meta)


def load_checkpoint(path, model=None, optimizer=None):
    """Load into ``model`` (and ``optimizer``) if given; returns ``(arrays, meta)``."""
    arrays, meta = load_arrays(path)
    if model is not None:
        model.load_state({k: v for k, v in arrays.items() if not k.startswith("optim.")})
    if optimizer is not None:
        optimizer.load_state_arrays(
            {k[len("optim."):]: v for k, v in arrays.items() if k.startswith("optim.")}
        )
    return arrays, meta
