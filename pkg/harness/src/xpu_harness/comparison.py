"""Reference-vs-candidate output comparison with identical weights.

Seeds cover every RNG domain; weights copy by state dict first, falling
back to a shape-matched positional copy when parameter names differ.
Inputs are cloned before each forward pass to guard against in-place
modification, and both models run without gradient tracking. NaN in the
candidate output rejects immediately; so does Inf appearing where the
reference has none.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np
import torch

from .errors import HarnessError


def set_all_seeds(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if torch.cuda.is_available():
        torch.cuda.manual_seed_all(seed)
    xpu = getattr(torch, "xpu", None)
    if xpu is not None and xpu.is_available():
        xpu.manual_seed_all(seed)


def copy_weights(reference: torch.nn.Module, candidate: torch.nn.Module) -> str:
    """Copy reference parameters/buffers into the candidate.

    Returns which path was used ("named" or "positional"). Shape mismatch
    on the positional path is a structural error.
    """
    try:
        candidate.load_state_dict(reference.state_dict())
        return "named"
    except (RuntimeError, KeyError):
        pass
    ref_params = list(reference.parameters()) + list(reference.buffers())
    cand_params = list(candidate.parameters()) + list(candidate.buffers())
    if len(ref_params) != len(cand_params):
        raise HarnessError(
            f"positional weight copy impossible: {len(ref_params)} reference "
            f"tensors vs {len(cand_params)} candidate tensors"
        )
    with torch.no_grad():
        for ref, cand in zip(ref_params, cand_params):
            if ref.shape != cand.shape:
                raise HarnessError(
                    f"positional weight copy shape mismatch: {tuple(ref.shape)} "
                    f"vs {tuple(cand.shape)}"
                )
            cand.copy_(ref)
    return "positional"


def _flatten_outputs(output) -> list[torch.Tensor]:
    if isinstance(output, torch.Tensor):
        return [output]
    if isinstance(output, (tuple, list)):
        flat = []
        for item in output:
            flat.extend(_flatten_outputs(item))
        return flat
    raise HarnessError(f"unsupported model output type {type(output).__name__}")


@dataclass
class DiffSummary:
    correct: bool
    nan: bool = False
    inf_new: bool = False
    shape_mismatch: bool = False
    max_abs_diff: float = 0.0
    mean_diff: float = 0.0
    max_rel_diff: float = 0.0
    exceed_count: int = 0
    exceed_pct: float = 0.0
    feedback: str = ""

    def to_dict(self) -> dict:
        return dict(
            correct=self.correct, nan=self.nan, inf_new=self.inf_new,
            shape_mismatch=self.shape_mismatch, max_abs_diff=self.max_abs_diff,
            mean_diff=self.mean_diff, max_rel_diff=self.max_rel_diff,
            exceed_count=self.exceed_count, exceed_pct=self.exceed_pct,
            feedback=self.feedback,
        )


def compare_outputs(
    reference: torch.nn.Module,
    candidate: torch.nn.Module,
    inputs: list[torch.Tensor],
    rtol: float,
    atol: float,
    seed: int = 0,
) -> DiffSummary:
    set_all_seeds(seed)
    with torch.no_grad():
        ref_out = reference(*[x.clone() for x in inputs])
        cand_out = candidate(*[x.clone() for x in inputs])

    ref_tensors = _flatten_outputs(ref_out)
    cand_tensors = _flatten_outputs(cand_out)
    if len(ref_tensors) != len(cand_tensors) or any(
        r.shape != c.shape for r, c in zip(ref_tensors, cand_tensors)
    ):
        return DiffSummary(
            correct=False, shape_mismatch=True,
            feedback="output structure/shape mismatch between candidate and reference",
        )

    max_abs = 0.0
    mean_sum = 0.0
    count = 0
    max_rel = 0.0
    exceed = 0
    saw_nan = False
    saw_new_inf = False
    for ref, cand in zip(ref_tensors, cand_tensors):
        ref = ref.float()
        cand = cand.float()
        if torch.isnan(cand).any():
            saw_nan = True
            break
        new_inf = torch.isinf(cand) & ~torch.isinf(ref)
        if new_inf.any():
            saw_new_inf = True
        diff = (cand - ref).abs()
        max_abs = max(max_abs, diff.max().item())
        mean_sum += diff.sum().item()
        count += diff.numel()
        rel = diff / ref.abs().clamp_min(1e-12)
        max_rel = max(max_rel, rel.max().item())
        exceed += int((diff > atol + rtol * ref.abs()).sum().item())

    if saw_nan:
        return DiffSummary(
            correct=False, nan=True,
            feedback="candidate output contains NaN; rejected immediately",
        )
    if saw_new_inf:
        return DiffSummary(
            correct=False, inf_new=True,
            feedback="candidate output contains Inf where the reference has none",
        )

    mean_diff = mean_sum / max(1, count)
    exceed_pct = 100.0 * exceed / max(1, count)
    correct = exceed == 0
    if correct:
        feedback = f"outputs match within rtol={rtol:g}, atol={atol:g}"
    else:
        feedback = (
            f"max_abs_diff={max_abs:g}, mean_diff={mean_diff:g}, "
            f"max_rel_diff={max_rel:g}, {exceed} elements ({exceed_pct:.2f}%) "
            f"exceed tolerance"
        )
    return DiffSummary(
        correct=correct, max_abs_diff=max_abs, mean_diff=mean_diff,
        max_rel_diff=max_rel, exceed_count=exceed, exceed_pct=exceed_pct,
        feedback=feedback,
    )
