"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import ComputationRecord, Tensor, backward, no_grad, use_record


class NondeterminismError(RuntimeError):
    """The checked function returned different values for identical inputs."""


@dataclass
class CoordResult:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    failing_param_names: list
    worst_param: Optional[str]
    coords: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failing_param_names

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"{status}: {len(self.coords)} coordinates, max rel err {self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.0e}), worst parameter {self.worst_param}"
        ]
        for name in self.failing_param_names:
            lines.append(f"  failing: {name}")
        return "\n".join(lines)


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _name(p: Tensor, i: int) -> str:
    return getattr(p, "name", "") or f"param{i}"


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    coords_per_param: int = 8,
    seed: int = 0,
    fault_scale: Optional[float] = None,
    fault_param: Optional[str] = None,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads ``params`` by reference; it must be
    deterministic and the parameters must be float64. ``fault_scale``
    multiplies the analytic gradient of ``fault_param`` (default: the first
    parameter) to exercise the failure path.
    """
    params = list(params)
    for i, p in enumerate(params):
        if p.data.dtype != np.float64:
            raise TypeError(f"{_name(p, i)} is {p.data.dtype}; finite differences need float64")

    with no_grad():
        v1 = float(f().data)
        v2 = float(f().data)
    if v1 != v2 and not (np.isnan(v1) and np.isnan(v2)):
        raise NondeterminismError(f"f() returned {v1!r} then {v2!r}")

    for p in params:
        p.requires_grad = True
        p.grad = None
    with use_record(ComputationRecord()) as rec:
        loss = f()
        backward(loss, rec)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    if fault_scale is not None:
        target = fault_param if fault_param is not None else _name(params[0], 0)
        for i, p in enumerate(params):
            if _name(p, i) == target:
                analytic[i] = analytic[i] * fault_scale

    rng = np.random.default_rng(seed)
    coords = []
    failing = []
    worst, worst_err = None, 0.0
    with no_grad():
        for i, p in enumerate(params):
            name = _name(p, i)
            flat = p.data.reshape(-1)
            k = min(coords_per_param, flat.size)
            picks = rng.choice(flat.size, size=k, replace=False)
            bad = False
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + epsilon
                fp = float(f().data)
                flat[idx] = orig - epsilon
                fm = float(f().data)
                flat[idx] = orig
                num = (fp - fm) / (2 * epsilon)
                ana = float(analytic[i].reshape(-1)[idx])
                err = rel_error(ana, num)
                coords.append(CoordResult(name, np.unravel_index(idx, p.shape), ana, num, err))
                if err > worst_err or worst is None:
                    worst, worst_err = name, err
                if err > tolerance:
                    bad = True
            if bad:
                failing.append(name)
    return GradCheckReport(worst_err, failing, worst, coords, tolerance)
