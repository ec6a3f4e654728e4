"""Tensor value type, computation record and engine-wide settings.

Every differentiable op appends a :class:`Node` to the active
:class:`ComputationRecord` when at least one of its inputs requires a
gradient. Because nodes are appended in execution order, the record is
already topologically sorted and :func:`backward` simply walks it in
reverse.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Node",
    "ComputationRecord",
    "ShapeError",
    "backward",
    "no_grad",
    "grad_enabled",
    "current_record",
    "use_record",
    "default_dtype",
    "set_default_dtype",
    "precision",
    "MacCounter",
    "count_macs",
    "mac_tag",
    "tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.dtype(np.float32)
        _state.grad = True
        _state.record = None
        _state.counter = None
        _state.tag = "other"
    return _state


def default_dtype() -> np.dtype:
    return _st().dtype


def set_default_dtype(dtype) -> None:
    """Switch the engine-wide float type (``float32`` or ``float64``)."""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily run the engine in another float type, e.g. ``float64``."""
    prev = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def grad_enabled() -> bool:
    return _st().grad


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _st()
    prev = st.grad
    st.grad = False
    try:
        yield
    finally:
        st.grad = prev


@dataclass
class Node:
    """One executed op: its output, inputs and a closure mapping the
    output gradient to a tuple of input gradients (``None`` to skip)."""

    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class ComputationRecord:
    nodes: list = field(default_factory=list)

    def append(self, node: Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_record() -> ComputationRecord:
    st = _st()
    if st.record is None:
        st.record = ComputationRecord()
    return st.record


@contextlib.contextmanager
def use_record(record: ComputationRecord) -> Iterator[ComputationRecord]:
    """Route recording on this thread to ``record`` for the duration."""
    st = _st()
    prev = st.record
    st.record = record
    try:
        yield record
    finally:
        st.record = prev


class MacCounter:
    """Multiply-accumulate tally keyed by tag."""

    def __init__(self):
        self.by_tag = defaultdict(int)

    def add(self, n: int) -> None:
        self.by_tag[_st().tag] += int(n)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def __getitem__(self, tag: str) -> int:
        return self.by_tag.get(tag, 0)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    st = _st()
    prev = st.counter
    st.counter = MacCounter()
    try:
        yield st.counter
    finally:
        st.counter = prev


@contextlib.contextmanager
def mac_tag(tag: str) -> Iterator[None]:
    st = _st()
    prev = st.tag
    st.tag = tag
    try:
        yield
    finally:
        st.tag = prev


def _count(n: int) -> None:
    counter = _st().counter
    if counter is not None:
        counter.add(n)


class Tensor:
    """Dense array with an optional gradient.

    Values are immutable by convention; only parameters are updated in
    place, and only between optimizer steps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def permute(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.permute(self, axes)


class Parameter(Tensor):
    """Trainable tensor. The dotted ``name`` is assigned by the owning module."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=default_dtype()), requires_grad=requires_grad)


def make_result(op: str, data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    """Wrap ``data`` and record a node if any input needs a gradient."""
    needs = grad_enabled() and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor(data, requires_grad=needs)
    if needs:
        current_record().append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor, record: Optional[ComputationRecord] = None) -> None:
    """Populate ``.grad`` of every tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so callers zero
    parameter grads between steps. The record is cleared afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    record = record if record is not None else current_record()
    if len(record) == 0:
        raise RuntimeError("computation record is empty; nothing to differentiate")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # leaves: whatever was not consumed by a node output
    leaves = {}
    for node in record.nodes:
        for t in node.inputs:
            if isinstance(t, Tensor) and t.requires_grad:
                leaves[id(t)] = t
    leaves[id(loss)] = loss
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None:
            continue
        g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
    record.clear()
