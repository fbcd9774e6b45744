"""Kernel source artifacts partitioned into harness and kernel regions.

A kernel module follows the KernelBench packaging convention: a file with
imports, one or more jit-decorated Triton kernel functions, a ``Model``
wrapper class, and input-generation helpers. The wrapper, imports, and
helpers form the immutable harness; the jit-decorated functions (with their
decorators, autotune included) are the mutable kernel regions. Anything
else (launch wrappers, constants) is unowned.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import dataclass, field

INPUT_HELPER_NAMES = frozenset({"get_inputs", "get_init_inputs"})


def fingerprint(source: str) -> str:
    """Content hash of raw source bytes (strict: whitespace-sensitive)."""
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SourceSpan:
    name: str  # declaration name, or "import[<i>]" for import statements
    start_line: int  # 1-based, decorators included
    end_line: int
    text: str


def _segment(lines: list[str], start_line: int, end_line: int) -> str:
    return "\n".join(lines[start_line - 1 : end_line])


def _decorated_start(node: ast.stmt) -> int:
    decorators = getattr(node, "decorator_list", [])
    return min([d.lineno for d in decorators] + [node.lineno])


def _is_jit_decorator(dec: ast.expr) -> bool:
    # Matches @triton.jit, @jit, and either wrapped in a call.
    if isinstance(dec, ast.Call):
        dec = dec.func
    if isinstance(dec, ast.Attribute):
        return dec.attr == "jit"
    if isinstance(dec, ast.Name):
        return dec.id == "jit"
    return False


@dataclass
class KernelModule:
    source: str
    harness_region: tuple[SourceSpan, ...] = ()
    kernel_regions: tuple[SourceSpan, ...] = ()
    fingerprint: str = ""
    _tree: ast.Module | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_source(cls, source: str) -> "KernelModule":
        """Partition a parseable module into harness and kernel spans.

        Raises SyntaxError when the source does not parse; callers that need
        a level-result instead should go through the syntax verifier first.
        """
        tree = ast.parse(source)
        lines = source.split("\n")
        harness: list[SourceSpan] = []
        kernels: list[SourceSpan] = []
        import_index = 0
        for node in tree.body:
            if isinstance(node, (ast.Import, ast.ImportFrom)):
                harness.append(
                    SourceSpan(
                        name=f"import[{import_index}]",
                        start_line=node.lineno,
                        end_line=node.end_lineno,
                        text=_segment(lines, node.lineno, node.end_lineno),
                    )
                )
                import_index += 1
            elif isinstance(node, ast.ClassDef):
                start = _decorated_start(node)
                harness.append(
                    SourceSpan(node.name, start, node.end_lineno, _segment(lines, start, node.end_lineno))
                )
            elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
                start = _decorated_start(node)
                span = SourceSpan(node.name, start, node.end_lineno, _segment(lines, start, node.end_lineno))
                if any(_is_jit_decorator(d) for d in node.decorator_list):
                    kernels.append(span)
                elif node.name in INPUT_HELPER_NAMES:
                    harness.append(span)
        return cls(
            source=source,
            harness_region=tuple(harness),
            kernel_regions=tuple(kernels),
            fingerprint=fingerprint(source),
            _tree=tree,
        )

    @property
    def tree(self) -> ast.Module:
        if self._tree is None:
            object.__setattr__(self, "_tree", ast.parse(self.source))
        return self._tree

    def harness_by_name(self) -> dict[str, SourceSpan]:
        return {span.name: span for span in self.harness_region}

    def import_texts(self) -> list[str]:
        return [s.text for s in self.harness_region if s.name.startswith("import[")]

    def named_harness_spans(self) -> list[SourceSpan]:
        return [s for s in self.harness_region if not s.name.startswith("import[")]
