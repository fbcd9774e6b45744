"""Spec-driven input tensor generation.

Identical (spec, variant, seed) triples yield bitwise-identical tensors:
one CPU generator is seeded per call and consumed in declared input order,
and every transform is a deterministic function of tensor plus generator
state. Tensors are generated on CPU and moved to the target device last.
"""

from __future__ import annotations

import torch

from .errors import InputGenError
from .specio import HarnessSpec, InputDesc

# Transforms that are well-defined on integer dtypes.
_INT_SAFE = frozenset({"abs", "triu", "tril", "transpose", "rademacher"})
_NEEDS_MATRIX = frozenset({"symmetric", "triu", "tril", "transpose"})


def _base_tensor(desc: InputDesc, shape: list[int], dtype: torch.dtype, g: torch.Generator) -> torch.Tensor:
    if dtype.is_floating_point:
        return torch.randn(shape, generator=g, dtype=torch.float32).to(dtype)
    if dtype == torch.bool:
        return torch.randint(0, 2, shape, generator=g, dtype=torch.int8).bool()
    low, high = desc.range or (0, 9)
    if high < low:
        raise InputGenError(f"input {desc.name!r}: empty range {desc.range}")
    return torch.randint(low, high + 1, shape, generator=g, dtype=dtype)


def _apply_transform(name: str, x: torch.Tensor, desc: InputDesc, g: torch.Generator) -> torch.Tensor:
    if not x.dtype.is_floating_point and name not in _INT_SAFE:
        raise InputGenError(
            f"input {desc.name!r}: transform {name!r} is unsatisfiable on integer dtype {x.dtype}"
        )
    if name in _NEEDS_MATRIX and x.dim() < 2:
        raise InputGenError(f"input {desc.name!r}: transform {name!r} needs >= 2 dimensions")
    if name == "scale":
        return x * 0.1
    if name == "softmax":
        return torch.softmax(x, dim=-1)
    if name == "abs":
        return x.abs()
    if name == "normalize":
        return x / x.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    if name == "symmetric":
        if x.shape[-1] != x.shape[-2]:
            raise InputGenError(
                f"input {desc.name!r}: symmetric needs square trailing dims, got {tuple(x.shape)}"
            )
        return (x + x.transpose(-2, -1)) / 2
    if name == "triu":
        return torch.triu(x)
    if name == "tril":
        return torch.tril(x)
    if name == "transpose":
        return x.transpose(-2, -1)
    if name == "uniform":
        return torch.rand(x.shape, generator=g, dtype=torch.float32).to(x.dtype)
    if name == "rademacher":
        signs = torch.randint(0, 2, x.shape, generator=g, dtype=torch.int8) * 2 - 1
        return signs.to(x.dtype)
    raise InputGenError(f"unknown transform {name!r}")  # pragma: no cover


def generate_inputs(
    spec: HarnessSpec, variant: str, seed: int, device: str = "cpu"
) -> dict[str, torch.Tensor]:
    """Build the named tensor set for one variant, transforms in order."""
    v = spec.variant(variant)
    g = torch.Generator(device="cpu")
    g.manual_seed(seed)
    tensors: dict[str, torch.Tensor] = {}
    for desc in spec.inputs:
        shape = desc.concrete_shape(v.dims)
        dtype = desc.resolved_dtype(v.dtype)
        x = _base_tensor(desc, shape, dtype, g)
        for name in desc.transforms:
            x = _apply_transform(name, x, desc, g)
        tensors[desc.name] = x.to(device) if device != "cpu" else x
    return tensors
