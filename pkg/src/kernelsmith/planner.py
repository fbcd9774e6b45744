"""Stage-order planning under the hard dependency constraints.

The fallback order is the default sequence filtered to the active set; it
is constraint-consistent for every possible subset because the default
sequence itself linearizes the dependency graph. An LLM may propose a
different order, but any malformed or constraint-violating proposal is
rejected wholesale in favor of the fallback (no repair heuristics).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .llm import ChatRequest, LlmError
from .stages import DEFAULT_SEQUENCE, DEPENDENCY_EDGES, OPTIMIZATION_STAGES

logger = logging.getLogger(__name__)


@dataclass
class StagePlan:
    ordered_stages: list[str]
    skipped_stages: set[str] = field(default_factory=set)
    provenance: str = "fallback_default"  # llm | fallback_default


def validate_order(order: list[str]) -> tuple[bool, str | None]:
    """Check an order is duplicate-free, within the nine stages, and
    constraint-consistent. Returns (ok, first violation description)."""
    seen: set[str] = set()
    for name in order:
        if name not in OPTIMIZATION_STAGES:
            return False, f"unknown stage {name!r}"
        if name in seen:
            return False, f"duplicate stage {name!r}"
        seen.add(name)
    index = {name: i for i, name in enumerate(order)}
    for before, after in DEPENDENCY_EDGES:
        if before in index and after in index and index[before] >= index[after]:
            return False, f"constraint violated: {before} must precede {after}"
    return True, None


def fallback_plan(active_stages: set[str]) -> list[str]:
    return [s for s in DEFAULT_SEQUENCE if s in active_stages]


PLANNER_SYSTEM = """\
You order GPU kernel optimization stages. Hard constraints (earlier stage
must run before later stage):
{constraints}
Reply with ONLY a comma-separated list containing each requested stage
exactly once, in your chosen execution order.
"""


def _planner_prompt(active_stages: set[str], issues) -> str:
    lines = [f"Stages to order: {', '.join(sorted(active_stages))}"]
    if issues:
        lines.append("Detected issues:")
        lines += [
            f"- {i.type.name} (stage {i.type.stage}, severity {i.severity}): {i.description}"
            for i in issues
        ]
    return "\n".join(lines)


def _parse_order(text: str) -> list[str]:
    cleaned = text.strip().strip("[]")
    return [tok.strip() for tok in cleaned.replace("\n", ",").split(",") if tok.strip()]


def plan(active_stages: set[str], issues: list | None = None, llm=None) -> StagePlan:
    """Order the active stages, via the LLM when available.

    Never fatal: LLM failure or a rejected proposal degrades to the
    fallback order.
    """
    unknown = active_stages - OPTIMIZATION_STAGES
    if unknown:
        raise ValueError(f"active stages outside the nine optimization stages: {sorted(unknown)}")
    skipped = set(OPTIMIZATION_STAGES) - active_stages
    if not active_stages:
        return StagePlan(ordered_stages=[], skipped_stages=skipped)

    if llm is not None:
        constraints = "\n".join(f"- {b} before {a}" for b, a in DEPENDENCY_EDGES)
        try:
            response = llm.complete(
                ChatRequest(
                    system=PLANNER_SYSTEM.format(constraints=constraints),
                    messages=[("user", _planner_prompt(active_stages, issues))],
                )
            )
            proposal = _parse_order(response.text)
            ok, violation = validate_order(proposal)
            if ok and set(proposal) == active_stages:
                return StagePlan(
                    ordered_stages=proposal, skipped_stages=skipped, provenance="llm"
                )
            logger.warning(
                "LLM plan rejected (%s); using fallback order",
                violation or "not a permutation of the active set",
            )
        except LlmError as exc:
            logger.warning("planner LLM unavailable (%s); using fallback order", exc)

    return StagePlan(ordered_stages=fallback_plan(active_stages), skipped_stages=skipped)
