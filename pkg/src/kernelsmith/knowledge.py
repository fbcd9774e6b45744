"""Machine-readable optimization expertise: constraints, patterns, examples.

The knowledge directory holds YAML files, each contributing any of three
artifact classes plus an optional ``stage_aliases`` map. Full-code examples
live in an ``examples/`` subdirectory indexed by ``index.yaml``. Loading is
order-independent and immutable afterward; :func:`format_for_llm` selects
the slice relevant to one stage for prompt injection.

Authoring schema (see knowledge/README.md for the worked guide):

    stage_aliases: {memory_patterns: memory_access}
    constraints:
      - id, severity (critical|info), description,
        wrong_example, correct_example, stages (optional list)
    patterns:
      - id, stage, rationale, before, after,
        expected_speedup ([low, high]), applicability (list of tags)

    examples/index.yaml:
      examples:
        - id, optimizations_applied, expected_speedup, stages,
          unoptimized (file), optimized (file)
"""

from __future__ import annotations

import ast
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .stages import OPTIMIZATION_STAGES

logger = logging.getLogger(__name__)

# Alias table is data, not code: files may extend it. These defaults mirror
# the conventional knowledge file names.
BUILTIN_ALIASES: dict[str, str] = {
    "memory_patterns": "memory_access",
    "gpu_optimizations": "gpu_specific",
    "dtype_optimizations": "dtype_fix",
    "fusion_patterns": "fusion",
}


class KnowledgeLoadError(Exception):
    """The knowledge directory itself is unusable."""


class UnknownStageError(ValueError):
    def __init__(self, stage: str):
        valid = ", ".join(sorted(OPTIMIZATION_STAGES))
        super().__init__(f"unknown stage {stage!r}; valid stages: {valid}")
        self.stage = stage


@dataclass(frozen=True)
class Constraint:
    id: str
    severity: str  # critical | info
    description: str
    wrong_example: str
    correct_example: str
    stages: frozenset[str] = frozenset()  # empty = cross-stage

    def __post_init__(self):
        if self.severity not in ("critical", "info"):
            raise ValueError(f"constraint {self.id}: bad severity {self.severity!r}")
        if not self.wrong_example or not self.correct_example:
            raise ValueError(f"constraint {self.id}: wrong/correct examples required")


@dataclass(frozen=True)
class Pattern:
    id: str
    stage: str
    rationale: str
    before: str
    after: str
    expected_speedup: tuple[float, float]
    applicability: tuple[str, ...] = ()

    def __post_init__(self):
        low, high = self.expected_speedup
        if not (0 < low <= high):
            raise ValueError(f"pattern {self.id}: bad speedup interval {low}..{high}")


@dataclass(frozen=True)
class CodeExample:
    id: str
    optimizations_applied: tuple[str, ...]
    expected_speedup: tuple[float, float]
    unoptimized: str
    optimized: str
    stages: frozenset[str] = frozenset()


@dataclass
class KnowledgeBase:
    constraints: list[Constraint] = field(default_factory=list)
    patterns: list[Pattern] = field(default_factory=list)
    examples: list[CodeExample] = field(default_factory=list)
    source_files: list[Path] = field(default_factory=list)
    aliases: dict[str, str] = field(default_factory=lambda: dict(BUILTIN_ALIASES))
    diagnostics: list[str] = field(default_factory=list)

    def normalize_stage(self, name: str) -> str:
        """Resolve a stage alias to its canonical name (idempotent)."""
        return self.aliases.get(name, name)


def _resolve_aliases(raw: dict[str, str], diagnostics: list[str]) -> dict[str, str]:
    """Collapse alias chains to fixed points so normalization is one lookup."""
    resolved: dict[str, str] = {}
    for key in raw:
        target = raw[key]
        seen = {key}
        while target in raw and target not in seen:
            seen.add(target)
            target = raw[target]
        if target in seen and target != raw.get(target, target):
            diagnostics.append(f"alias cycle involving {key!r} dropped")
            continue
        resolved[key] = target
    return resolved


def _speedup_interval(value, where: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        return (float(value), float(value))
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return (float(value[0]), float(value[1]))
    raise ValueError(f"{where}: expected_speedup must be a number or [low, high]")


def load_knowledge(kb_dir: str | Path) -> KnowledgeBase:
    """Load every well-formed YAML entry under ``kb_dir``.

    Malformed files are skipped with a per-file diagnostic; entries tagged
    to unknown stages are skipped (not fatal); stage aliases are normalized.
    Duplicate ids keep the first occurrence in lexicographic file order.
    """
    kb_dir = Path(kb_dir)
    if not kb_dir.is_dir():
        raise KnowledgeLoadError(f"knowledge directory not readable: {kb_dir}")

    diagnostics: list[str] = []
    docs: list[tuple[Path, dict]] = []
    for path in sorted(p for p in kb_dir.iterdir() if p.suffix in (".yaml", ".yml")):
        try:
            doc = yaml.safe_load(path.read_text())
        except (yaml.YAMLError, OSError) as exc:
            diagnostics.append(f"{path.name}: skipped, malformed YAML ({exc})")
            continue
        if doc is None:
            continue
        if not isinstance(doc, dict):
            diagnostics.append(f"{path.name}: skipped, top level is not a mapping")
            continue
        docs.append((path, doc))

    # Aliases are merged across all files first so entry loading sees the
    # complete table regardless of file order.
    raw_aliases = dict(BUILTIN_ALIASES)
    for path, doc in docs:
        extra = doc.get("stage_aliases") or {}
        if not isinstance(extra, dict):
            diagnostics.append(f"{path.name}: stage_aliases is not a mapping, ignored")
            continue
        raw_aliases.update({str(k): str(v) for k, v in extra.items()})
    aliases = _resolve_aliases(raw_aliases, diagnostics)

    kb = KnowledgeBase(aliases=aliases, diagnostics=diagnostics)

    def norm_stage(name, where) -> str | None:
        canonical = aliases.get(str(name), str(name))
        if canonical not in OPTIMIZATION_STAGES:
            diagnostics.append(f"{where}: unknown stage {name!r}, entry skipped")
            return None
        return canonical

    seen_ids: dict[str, set[str]] = {"constraint": set(), "pattern": set(), "example": set()}

    def claim_id(kind: str, entry_id: str, where: str) -> bool:
        if entry_id in seen_ids[kind]:
            diagnostics.append(f"{where}: duplicate {kind} id {entry_id!r}, kept first")
            logger.warning("duplicate %s id %r in %s (first kept)", kind, entry_id, where)
            return False
        seen_ids[kind].add(entry_id)
        return True

    for path, doc in docs:
        kb.source_files.append(path)
        for raw in doc.get("constraints") or []:
            where = f"{path.name}:constraint {raw.get('id', '?')}"
            try:
                stage_set = []
                ok = True
                for s in raw.get("stages") or []:
                    canonical = norm_stage(s, where)
                    if canonical is None:
                        ok = False
                        break
                    stage_set.append(canonical)
                if not ok or not claim_id("constraint", str(raw["id"]), where):
                    continue
                kb.constraints.append(
                    Constraint(
                        id=str(raw["id"]),
                        severity=str(raw["severity"]),
                        description=str(raw["description"]),
                        wrong_example=str(raw["wrong_example"]),
                        correct_example=str(raw["correct_example"]),
                        stages=frozenset(stage_set),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                diagnostics.append(f"{where}: skipped ({exc})")
        for raw in doc.get("patterns") or []:
            where = f"{path.name}:pattern {raw.get('id', '?')}"
            try:
                canonical = norm_stage(raw["stage"], where)
                if canonical is None:
                    continue
                if not claim_id("pattern", str(raw["id"]), where):
                    continue
                kb.patterns.append(
                    Pattern(
                        id=str(raw["id"]),
                        stage=canonical,
                        rationale=str(raw["rationale"]),
                        before=str(raw["before"]),
                        after=str(raw["after"]),
                        expected_speedup=_speedup_interval(raw["expected_speedup"], where),
                        applicability=tuple(str(t) for t in raw.get("applicability") or ()),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                diagnostics.append(f"{where}: skipped ({exc})")

    _load_examples(kb_dir / "examples", kb, norm_stage, claim_id)
    return kb


def _load_examples(examples_dir: Path, kb: KnowledgeBase, norm_stage, claim_id) -> None:
    manifest = examples_dir / "index.yaml"
    if not manifest.is_file():
        return
    try:
        doc = yaml.safe_load(manifest.read_text())
    except (yaml.YAMLError, OSError) as exc:
        kb.diagnostics.append(f"examples/index.yaml: skipped, malformed YAML ({exc})")
        return
    kb.source_files.append(manifest)
    for raw in (doc or {}).get("examples") or []:
        where = f"examples/index.yaml:example {raw.get('id', '?')}"
        try:
            stage_set = []
            ok = True
            for s in raw.get("stages") or []:
                canonical = norm_stage(s, where)
                if canonical is None:
                    ok = False
                    break
                stage_set.append(canonical)
            if not ok or not claim_id("example", str(raw["id"]), where):
                continue
            unoptimized = (examples_dir / raw["unoptimized"]).read_text()
            optimized = (examples_dir / raw["optimized"]).read_text()
            for label, source in (("unoptimized", unoptimized), ("optimized", optimized)):
                ast.parse(source)  # both sides must be valid kernel modules
            kb.examples.append(
                CodeExample(
                    id=str(raw["id"]),
                    optimizations_applied=tuple(str(t) for t in raw.get("optimizations_applied") or ()),
                    expected_speedup=_speedup_interval(raw["expected_speedup"], where),
                    unoptimized=unoptimized,
                    optimized=optimized,
                    stages=frozenset(stage_set),
                )
            )
        except SyntaxError as exc:
            kb.diagnostics.append(f"{where}: skipped, {label} code does not parse ({exc})")
        except (KeyError, ValueError, TypeError, OSError) as exc:
            kb.diagnostics.append(f"{where}: skipped ({exc})")


def _speedup_label(interval: tuple[float, float]) -> str:
    low, high = interval
    if low == high:
        return f"{low:g}x"
    return f"{low:g}x-{high:g}x"


def format_for_llm(kb: KnowledgeBase, stage: str) -> str:
    """Assemble the prompt section for one stage, deterministically.

    Included: every critical constraint regardless of its stage tags, plus
    info constraints tagged to (or spanning) the stage; patterns whose stage
    equals the request; examples whose stage set contains it. Within each
    class entries are ordered by id so output is byte-stable.
    """
    stage = kb.normalize_stage(stage)
    if stage not in OPTIMIZATION_STAGES:
        raise UnknownStageError(stage)

    lines: list[str] = ["## HARD CONSTRAINTS", ""]
    constraints = [
        c
        for c in kb.constraints
        if c.severity == "critical" or not c.stages or stage in c.stages
    ]
    for c in sorted(constraints, key=lambda c: c.id):
        lines += [
            f"### {c.id} [{c.severity}]",
            c.description.rstrip(),
            "",
            "Wrong:",
            "```python",
            c.wrong_example.rstrip(),
            "```",
            "",
            "Correct:",
            "```python",
            c.correct_example.rstrip(),
            "```",
            "",
        ]

    lines += ["## PATTERNS", ""]
    for p in sorted((p for p in kb.patterns if p.stage == stage), key=lambda p: p.id):
        applicability = f" [{', '.join(p.applicability)}]" if p.applicability else ""
        lines += [
            f"### {p.id} (expected speedup {_speedup_label(p.expected_speedup)}){applicability}",
            p.rationale.rstrip(),
            "",
            "Before:",
            "```python",
            p.before.rstrip(),
            "```",
            "",
            "After:",
            "```python",
            p.after.rstrip(),
            "```",
            "",
        ]

    lines += ["## EXAMPLES", ""]
    for e in sorted((e for e in kb.examples if stage in e.stages), key=lambda e: e.id):
        applied = ", ".join(e.optimizations_applied)
        lines += [
            f"### {e.id} (applied: {applied}; expected speedup {_speedup_label(e.expected_speedup)})",
            "",
            "Unoptimized:",
            "```python",
            e.unoptimized.rstrip(),
            "```",
            "",
            "Optimized:",
            "```python",
            e.optimized.rstrip(),
            "```",
            "",
        ]

    return "\n".join(lines).rstrip() + "\n"
