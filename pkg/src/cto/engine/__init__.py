"""Numpy-backed tensors with reverse-mode differentiation."""

from . import functional
from .gradcheck import GradCheckReport, NondeterminismError, finite_diff_check
from .tensor import (
    ComputationRecord,
    MacCounter,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    count_macs,
    current_record,
    default_dtype,
    grad_enabled,
    mac_tag,
    no_grad,
    precision,
    set_default_dtype,
    tensor,
    use_record,
)

__all__ = [
    "functional",
    "ComputationRecord",
    "GradCheckReport",
    "MacCounter",
    "NondeterminismError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "backward",
    "count_macs",
    "current_record",
    "default_dtype",
    "finite_diff_check",
    "grad_enabled",
    "mac_tag",
    "no_grad",
    "precision",
    "set_default_dtype",
    "tensor",
    "use_record",
]
