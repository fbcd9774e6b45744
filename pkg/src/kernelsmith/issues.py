"""Typed issue taxonomy, deterministic routing, and the LLM-backed analyzer.

Every issue type maps to exactly one optimization stage through a fixed
routing table; custom types can be registered at runtime. The analyzer asks
the chat backend for a JSON inventory of issues, drops records it cannot
validate, and never mutates the kernel it inspects.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

from .kernelmod import KernelModule
from .knowledge import KnowledgeBase
from .llm import ChatRequest, ContextOverflowError, LlmError
from .stages import OPTIMIZATION_STAGES

logger = logging.getLogger(__name__)

# Required keys of an open_ended proposal: what changes, why the transform
# is valid, a before/after sketch, and the estimated speedup with reasoning.
PROPOSAL_KEYS = ("what_changes", "why_valid", "sketch", "estimated_speedup")

BUILTIN_TAXONOMY: dict[str, str] = {
    # dtype
    "dtype_float64": "dtype_fix",
    "dtype_precision": "dtype_fix",
    "dtype_input_conversion": "dtype_fix",
    # fusion (four named categories; further ones arrive via registration)
    "unfused_kernels": "fusion",
    "fusion_register_pressure": "fusion",
    "fusion_replaces_vendor": "fusion",
    "fusion_noop": "fusion",
    # memory access
    "uncoalesced_access": "memory_access",
    "missing_boundary_check": "memory_access",
    "device_host_sync": "memory_access",
    "non_contiguous_input": "memory_access",
    "long_liveness": "memory_access",
    "high_register_pressure": "memory_access",
    # block pointers
    "manual_pointer_arithmetic": "block_pointers",
    "block_ptr_boundary_wrong": "block_pointers",
    "block_ptr_multiple_of_misuse": "block_pointers",
    "missing_block_pointers": "block_pointers",
    # persistent kernel
    "missing_persistent": "persistent_kernel",
    "persistent_num_progs_hardcoded": "persistent_kernel",
    # gpu-specific
    "suboptimal_warps": "gpu_specific",
    "missing_grf_mode": "gpu_specific",
    "suboptimal_tile_size": "gpu_specific",
    "no_swizzling": "gpu_specific",
    "repack_in_forward": "gpu_specific",
    "missing_packed_transpose": "gpu_specific",
    "serialized_n_tiles": "gpu_specific",
    "sigmoid_slow_exp": "gpu_specific",
    # structural rewrites
    "algorithmic_restructuring": "algorithmic",
    "open_ended": "discovery",
    # autotune
    "missing_autotune": "autotune",
}


class UnknownIssueTypeError(KeyError):
    def __init__(self, name: str, registry_name: str):
        super().__init__(f"issue type {name!r} not in the {registry_name} registry")
        self.name = name


class RegistrationError(ValueError):
    pass


class AnalysisBackendError(RuntimeError):
    """The chat backend failed while producing the issue inventory."""


@dataclass(frozen=True)
class IssueType:
    name: str
    stage: str


@dataclass
class Issue:
    type: IssueType
    severity: int  # 1..5, advisory only
    description: str
    suggested_fix: str
    estimated_speedup: tuple[float, float] = (1.0, 1.0)
    proposal: dict | None = None

    def __post_init__(self):
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity {self.severity} outside 1..5")
        if self.type.name == "open_ended":
            missing = [k for k in PROPOSAL_KEYS if not (self.proposal or {}).get(k)]
            if missing:
                raise ValueError(f"open_ended issue missing proposal parts: {missing}")


@dataclass
class ProblemContext:
    shapes: dict[str, list[int]] = field(default_factory=dict)
    flop_count: float | None = None
    dtype: str = "float32"

    def describe(self) -> str:
        parts = [f"{name}: {dims}" for name, dims in sorted(self.shapes.items())]
        flops = f"{self.flop_count:g}" if self.flop_count is not None else "unknown"
        return f"shapes {{{', '.join(parts)}}}, flop count {flops}, target dtype {self.dtype}"


@dataclass
class AnalysisReport:
    issues: list[Issue]
    kernel_fingerprint: str
    context: ProblemContext
    diagnostics: list[str] = field(default_factory=list)

    def active_stages(self, registry: "IssueRegistry | None" = None) -> set[str]:
        return {issue.type.stage for issue in self.issues}


class IssueRegistry:
    """Append-only name -> stage routing table."""

    def __init__(self, name: str = "built-in taxonomy", seed: dict[str, str] | None = None):
        self.name = name
        self._table: dict[str, str] = dict(BUILTIN_TAXONOMY if seed is None else seed)

    def route(self, issue_type: str) -> str:
        try:
            return self._table[issue_type]
        except KeyError:
            raise UnknownIssueTypeError(issue_type, self.name) from None

    def register(self, name: str, stage: str) -> IssueType:
        if name in self._table:
            raise RegistrationError(f"issue type {name!r} already registered")
        if stage not in OPTIMIZATION_STAGES:
            raise RegistrationError(
                f"cannot register {name!r}: unknown stage {stage!r}"
            )
        self._table[name] = stage
        return IssueType(name, stage)

    def known(self, name: str) -> bool:
        return name in self._table

    def issue_type(self, name: str) -> IssueType:
        return IssueType(name, self.route(name))

    def names(self) -> list[str]:
        return sorted(self._table)


DEFAULT_REGISTRY = IssueRegistry()


def route(issue_type: str, registry: IssueRegistry | None = None) -> str:
    return (registry or DEFAULT_REGISTRY).route(issue_type)


def register_issue_type(
    name: str, stage: str, registry: IssueRegistry | None = None
) -> IssueType:
    return (registry or DEFAULT_REGISTRY).register(name, stage)


ANALYZER_SYSTEM = """\
You are a GPU kernel performance analyst. Inspect the Triton kernel module
and report every optimization opportunity you can justify.

Reply with ONLY a JSON array. Each element:
  {"type": "<issue type>", "severity": <1-5>, "description": "...",
   "suggested_fix": "...", "speedup_low": <ratio>, "speedup_high": <ratio>}
For type "open_ended" additionally include
  "proposal": {"what_changes": "...", "why_valid": "...",
               "sketch": "...", "estimated_speedup": "..."}
Use only the issue types listed below. Reply [] if the kernel is already
well optimized.
"""

REASK_MESSAGE = (
    "Your previous reply could not be parsed as a JSON array of issue "
    "records. Reply again with ONLY the JSON array, no prose."
)


def _analysis_prompt(
    kernel_source: str,
    reference: str | None,
    kb: KnowledgeBase,
    context: ProblemContext,
    registry: IssueRegistry,
) -> str:
    pattern_lines = [
        f"- {p.id} (stage {p.stage}): {p.rationale.strip().splitlines()[0]}"
        for p in sorted(kb.patterns, key=lambda p: p.id)
    ]
    sections = [
        "Known issue types: " + ", ".join(registry.names()),
        "Problem context: " + context.describe(),
        "Optimization patterns available:\n" + ("\n".join(pattern_lines) or "(none)"),
        "Kernel module:\n```python\n" + kernel_source + "\n```",
    ]
    if reference:
        sections.append("Reference implementation:\n```python\n" + reference + "\n```")
    return "\n\n".join(sections)


def _extract_json_array(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    start = text.find("[")
    while start != -1:
        depth = 0
        for i in range(start, len(text)):
            if text[i] == "[":
                depth += 1
            elif text[i] == "]":
                depth -= 1
                if depth == 0:
                    try:
                        return json.loads(text[start : i + 1])
                    except json.JSONDecodeError:
                        break
        start = text.find("[", start + 1)
    raise ValueError("no JSON array found in response")


def _issue_from_record(raw: dict, registry: IssueRegistry, diagnostics: list[str]) -> Issue | None:
    name = str(raw.get("type", ""))
    if not registry.known(name):
        diagnostics.append(f"unknown issue type {name!r} dropped")
        return None
    severity = raw.get("severity", 3)
    try:
        severity = int(round(float(severity)))
    except (TypeError, ValueError):
        severity = 3
    severity = max(1, min(5, severity))
    low = float(raw.get("speedup_low", 1.0) or 1.0)
    high = float(raw.get("speedup_high", low) or low)
    proposal = raw.get("proposal")
    if proposal is not None and not isinstance(proposal, dict):
        proposal = {"what_changes": str(proposal)}
    try:
        return Issue(
            type=registry.issue_type(name),
            severity=severity,
            description=str(raw.get("description", "")),
            suggested_fix=str(raw.get("suggested_fix", "")),
            estimated_speedup=(low, max(low, high)),
            proposal=proposal,
        )
    except ValueError as exc:
        diagnostics.append(f"issue {name!r} dropped: {exc}")
        return None


def analyze(
    kernel: KernelModule,
    reference: str | None,
    kb: KnowledgeBase,
    context: ProblemContext,
    llm,
    registry: IssueRegistry | None = None,
) -> AnalysisReport:
    """Produce the typed issue inventory for a kernel.

    Unparseable LLM output gets exactly one re-ask, then degrades to an
    empty inventory with a warning (the planner's all-stage default applies
    downstream). Backend failures propagate as AnalysisBackendError.
    """
    registry = registry or DEFAULT_REGISTRY
    diagnostics: list[str] = []
    prompt = _analysis_prompt(kernel.source, reference, kb, context, registry)
    messages = [("user", prompt)]

    records = None
    for attempt in range(2):
        try:
            response = llm.complete(ChatRequest(system=ANALYZER_SYSTEM, messages=messages))
        except ContextOverflowError:
            raise
        except LlmError as exc:
            raise AnalysisBackendError(f"analysis backend failed: {exc}") from exc
        try:
            records = _extract_json_array(response.text)
            break
        except ValueError:
            if attempt == 0:
                messages = messages + [("assistant", response.text), ("user", REASK_MESSAGE)]
            else:
                diagnostics.append("analyzer response unparseable after re-ask; empty inventory")
                logger.warning("analyzer response unparseable after re-ask")
                records = []

    issues: list[Issue] = []
    for raw in records or []:
        if not isinstance(raw, dict):
            diagnostics.append(f"non-object issue record dropped: {raw!r}")
            continue
        issue = _issue_from_record(raw, registry, diagnostics)
        if issue is not None:
            issues.append(issue)
    return AnalysisReport(
        issues=issues,
        kernel_fingerprint=kernel.fingerprint,
        context=context,
        diagnostics=diagnostics,
    )
