"""Generate-verify-refine execution loop for one optimization stage.

Each iteration asks the backend for a thought plus a complete candidate
module, runs the verification tool on the candidate, and feeds the
observation back through an append-only trajectory. Context overflow
truncates the oldest complete trajectory group and retries; exhausting the
iteration budget falls back to a best-effort extraction that is
independently re-verified. A stage can therefore end only two ways: with a
candidate that passed the full cascade, or with the original code
byte-identical.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

from .hardware import GpuProfile, describe_profile
from .llm import ChatRequest, ContextOverflowError, LlmError
from .verify import DEFAULT_SENTINEL

logger = logging.getLogger(__name__)

ENTRY_KINDS = ("thought", "tool_name", "tool_args", "observation")
GROUP_SIZE = len(ENTRY_KINDS)
TOOL_NAME = "compile_and_verify"


class TruncationExhaustedError(ValueError):
    """Only one complete trajectory group remains; nothing can be removed."""


class CoverUnrecoverableError(RuntimeError):
    """Context overflow persisted with no diagnostic context left to drop."""


@dataclass(frozen=True)
class TrajectoryEntry:
    kind: str
    iteration: int
    payload: str


@dataclass
class Trajectory:
    entries: list[TrajectoryEntry] = field(default_factory=list)

    def append(self, kind: str, iteration: int, payload: str) -> None:
        if kind not in ENTRY_KINDS:
            raise ValueError(f"unknown entry kind {kind!r}")
        self.entries.append(TrajectoryEntry(kind, iteration, payload))

    def complete_groups(self) -> int:
        return len(self.entries) // GROUP_SIZE

    def render(self) -> str:
        return "\n".join(
            f"[{e.kind} {e.iteration}]\n{e.payload}" for e in self.entries
        )


def truncate(traj: Trajectory) -> Trajectory:
    """Remove exactly the oldest complete 4-entry group, preserving the rest.

    Requires at least two complete groups: the most recent error feedback is
    never sacrificed.
    """
    if traj.complete_groups() < 2:
        raise TruncationExhaustedError(
            "trajectory cannot be truncated further (only one tool call remains)"
        )
    return Trajectory(entries=list(traj.entries[GROUP_SIZE:]))


@dataclass
class CoverTask:
    original_code: str
    current_code: str
    stage: str
    issues: list
    knowledge: str
    gpu: GpuProfile
    max_iterations: int = 5
    success_sentinel: str = DEFAULT_SENTINEL

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class CoverOutcome:
    code: str
    succeeded: bool
    iterations_used: int
    via_fallback: bool
    trajectory: Trajectory


_FENCE_RE = re.compile(r"```(?:python)?\n(.*?)```", re.DOTALL)


def parse_candidate(text: str) -> tuple[str, str]:
    """Split a response into (thought, candidate code).

    The thought is everything before the first fenced block; the candidate
    is the last fenced block, canonicalized to end with exactly one newline.
    A fence-free response is treated as bare code.
    """
    matches = list(_FENCE_RE.finditer(text))
    if not matches:
        code = text.strip()
        return "", code + "\n" if code else code
    thought = text[: matches[0].start()].strip()
    code = matches[-1].group(1).strip("\n")
    return thought, code + "\n" if code else code


COVER_SYSTEM = """\
You optimize Triton GPU kernels for the {stage} stage. You may modify only
the @triton.jit kernel functions and their autotune decorators; the imports,
the Model wrapper class, and the input helpers are fixed infrastructure and
must be reproduced byte-for-byte.

Hardware: {gpu}

{knowledge}

Respond with your reasoning first, then the COMPLETE optimized module in a
single ```python fenced block. The {tool} tool will check syntax, structure,
correctness, and performance; it returns "{sentinel}" only when the
candidate is correct and strictly faster.
"""


def _issue_lines(issues) -> str:
    if not issues:
        return "(none recorded; apply stage best practices)"
    lines = []
    for issue in issues:
        lines.append(
            f"- {issue.type.name} (severity {issue.severity}): {issue.description}"
            + (f"\n  suggested fix: {issue.suggested_fix}" if issue.suggested_fix else "")
        )
        if issue.proposal:
            lines.append(f"  proposal: {json.dumps(issue.proposal, sort_keys=True)}")
    return "\n".join(lines)


def _build_request(task: CoverTask, traj: Trajectory, iteration: int) -> ChatRequest:
    system = COVER_SYSTEM.format(
        stage=task.stage,
        gpu=describe_profile(task.gpu),
        knowledge=task.knowledge,
        tool=TOOL_NAME,
        sentinel=task.success_sentinel,
    )
    user = (
        f"Issues to address:\n{_issue_lines(task.issues)}\n\n"
        f"Original module:\n```python\n{task.original_code}\n```\n\n"
        f"Current module:\n```python\n{task.current_code}\n```\n"
    )
    if traj.entries:
        user += f"\nTrajectory so far:\n{traj.render()}\n"
    user += f"\nIteration {iteration}: produce your thought and the full optimized module."
    return ChatRequest(system=system, messages=[("user", user)])


FALLBACK_INSTRUCTION = (
    "The iteration budget is exhausted. Review the full trajectory and emit "
    "your final best candidate: the COMPLETE module in a single ```python "
    "fenced block. Prefer the variant with the fewest verification failures."
)


def _generate(llm, task: CoverTask, traj: Trajectory, iteration: int):
    """One generation call, truncating the trajectory on context overflow.

    Mutates ``traj.entries`` in place when truncation happens so the caller
    observes the shrunken trajectory.
    """
    while True:
        try:
            return llm.complete(_build_request(task, traj, iteration))
        except ContextOverflowError:
            try:
                shrunk = truncate(traj)
            except TruncationExhaustedError as exc:
                raise CoverUnrecoverableError(
                    "context overflow persists and the trajectory cannot be "
                    "truncated further; refusing to operate without diagnostic "
                    "context"
                ) from exc
            logger.info(
                "context overflow at iteration %d: dropped oldest trajectory group",
                iteration,
            )
            traj.entries[:] = shrunk.entries


def _dump_failed(code: str, stage: str, reason: str, output_dir: Path) -> Path:
    failed_dir = output_dir / "failed"
    failed_dir.mkdir(parents=True, exist_ok=True)
    stamp = int(time.time() * 1000)
    path = failed_dir / f"{stage}_{stamp}.kernel"
    while path.exists():  # ms collisions under rapid-fire tests
        stamp += 1
        path = failed_dir / f"{stage}_{stamp}.kernel"
    path.write_text(code)
    path.with_suffix(".meta.json").write_text(
        json.dumps({"stage": stage, "timestamp_ms": stamp, "reason": reason}, indent=2)
    )
    return path


def run_cover(task: CoverTask, llm, verify, output_dir: str | Path | None = None) -> CoverOutcome:
    """Execute the generate-verify-refine loop for one stage.

    ``verify`` is the verification tool (candidate source in, the success
    sentinel or a diagnostic string out) or a list of such tools; this
    artifact registers a single compile-and-verify tool. The outcome code
    either passed the full cascade or is byte-identical to
    ``task.original_code`` - never a third state. Raises
    CoverUnrecoverableError only for unrecoverable context overflow.
    """
    tools = list(verify) if isinstance(verify, (list, tuple)) else [verify]
    traj = Trajectory()
    iterations_used = 0
    backend_failed = False

    for i in range(task.max_iterations):
        try:
            response = _generate(llm, task, traj, i)
        except CoverUnrecoverableError:
            raise
        except LlmError as exc:
            logger.warning("generation failed at iteration %d: %s", i, exc)
            backend_failed = True
            break
        iterations_used = i + 1
        thought, candidate = parse_candidate(response.text)
        traj.append("thought", i, thought)
        succeeded = False
        for tool in tools:
            observation = tool(candidate)
            if observation == task.success_sentinel:
                succeeded = True
                break
            traj.append("tool_name", i, getattr(tool, "name", TOOL_NAME))
            traj.append("tool_args", i, candidate)
            traj.append("observation", i, observation)
        if succeeded:
            return CoverOutcome(
                code=candidate,
                succeeded=True,
                iterations_used=iterations_used,
                via_fallback=False,
                trajectory=traj,
            )

    # Fallback: best-effort extraction over the full trajectory,
    # independently re-verified before acceptance.
    fallback_code = None
    if not backend_failed or traj.entries:
        try:
            request = _build_request(task, traj, task.max_iterations)
            request.messages.append(("user", FALLBACK_INSTRUCTION))
            response = llm.complete(request)
            _, fallback_code = parse_candidate(response.text)
        except LlmError as exc:
            logger.warning("fallback extraction failed: %s", exc)

    if fallback_code:
        observations = []
        for tool in tools:
            observation = tool(fallback_code)
            if observation == task.success_sentinel:
                return CoverOutcome(
                    code=fallback_code,
                    succeeded=True,
                    iterations_used=iterations_used,
                    via_fallback=True,
                    trajectory=traj,
                )
            observations.append(observation)
        if output_dir is not None:
            _dump_failed(fallback_code, task.stage, "\n".join(observations), Path(output_dir))

    return CoverOutcome(
        code=task.original_code,
        succeeded=False,
        iterations_used=iterations_used,
        via_fallback=True,
        trajectory=traj,
    )
