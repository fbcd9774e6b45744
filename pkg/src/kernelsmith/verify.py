"""Four-level verification cascade: syntax, structure, correctness,
performance.

Each level gates entry to the next; the first failure produces a
level-tagged diagnostic with remediation text. Only a candidate that is
both correct and strictly faster earns the success sentinel. Structure
verification also enforces the anti-evasion boundary: the harness region
(Model wrapper, imports, input helpers) must be byte-identical to the
baseline, and dynamic module access is rejected outright.
"""

from __future__ import annotations

import ast
import logging
from dataclasses import dataclass

from .bench import ProblemSpec, derive_metrics, trim_mean
from .kernelmod import KernelModule

logger = logging.getLogger(__name__)

DEFAULT_SENTINEL = "OPTIMIZATION_VERIFIED_SUCCESS"

VALID_NUM_WARPS_TEXT = "1, 2, 4, 8, 16, 32"
VALID_NUM_WARPS = (1, 2, 4, 8, 16, 32)
MAX_BLOCK_DIM = 256

LEVELS = ("syntax", "structure", "correctness", "performance")


@dataclass
class LevelResult:
    level: str
    passed: bool
    diagnostic: str = ""
    timings: tuple[float, float] | None = None  # (original_us, optimized_us)
    speedup: float | None = None


@dataclass
class VerificationReport:
    level_reached: str  # syntax | structure | correctness | performance | success
    passed: bool
    diagnostic: str = ""
    timings: tuple[float, float] | None = None
    speedup: float | None = None

    def __post_init__(self):
        if self.passed != (self.level_reached == "success"):
            raise ValueError("passed must hold exactly when level_reached is success")
        if not self.passed and not self.diagnostic:
            raise ValueError("failed reports require a diagnostic")


def verify_syntax(candidate: str) -> LevelResult:
    """Level 1: the candidate must parse."""
    try:
        ast.parse(candidate)
    except SyntaxError as exc:
        lines = candidate.split("\n")
        offending = ""
        if exc.lineno and 1 <= exc.lineno <= len(lines):
            offending = lines[exc.lineno - 1]
        return LevelResult(
            level="syntax",
            passed=False,
            diagnostic=(
                f"SyntaxError at line {exc.lineno}: {exc.msg}\n"
                f"  offending line: {offending.strip()}"
            ),
        )
    return LevelResult(level="syntax", passed=True)


def _has_required_imports(tree: ast.Module) -> tuple[bool, bool]:
    has_triton = False
    has_language = False
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            for alias in node.names:
                root = alias.name.split(".")[0]
                if root == "triton":
                    has_triton = True
                if alias.name == "triton.language":
                    has_language = True
        elif isinstance(node, ast.ImportFrom):
            if node.module and node.module.split(".")[0] == "triton":
                has_triton = True
                if node.module == "triton.language" or any(
                    a.name == "language" for a in node.names
                ):
                    has_language = True
    return has_triton, has_language


def _int_constant(node: ast.expr) -> int | None:
    if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
        return node.value
    return None


def _iter_named_int_literals(tree: ast.Module):
    """Yield (name, value) for literal integer bindings the checks care
    about: keyword arguments, plain assignments, annotated assignments,
    dict literals with string keys, and function-signature defaults."""
    for node in ast.walk(tree):
        if isinstance(node, ast.keyword) and node.arg:
            value = _int_constant(node.value)
            if value is not None:
                yield node.arg, value
        elif isinstance(node, ast.Assign):
            value = _int_constant(node.value)
            if value is not None:
                for target in node.targets:
                    if isinstance(target, ast.Name):
                        yield target.id, value
        elif isinstance(node, ast.AnnAssign) and node.value is not None:
            value = _int_constant(node.value)
            if value is not None and isinstance(node.target, ast.Name):
                yield node.target.id, value
        elif isinstance(node, ast.Dict):
            for key, val in zip(node.keys, node.values):
                if isinstance(key, ast.Constant) and isinstance(key.value, str):
                    value = _int_constant(val)
                    if value is not None:
                        yield key.value, value
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)):
            args = node.args
            positional = args.posonlyargs + args.args
            for arg, default in zip(positional[len(positional) - len(args.defaults):], args.defaults):
                value = _int_constant(default)
                if value is not None:
                    yield arg.arg, value
            for arg, default in zip(args.kwonlyargs, args.kw_defaults):
                if default is not None:
                    value = _int_constant(default)
                    if value is not None:
                        yield arg.arg, value


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


_DYNAMIC_IMPORT_BUILTINS = {"__import__", "eval", "exec"}


def _scan_dynamic_access(tree: ast.Module) -> str | None:
    """Conservative scan for dynamic module access / string-assembled
    attribute lookups. False positives are acceptable; kernels have no
    legitimate use for these constructs."""
    for node in ast.walk(tree):
        if not isinstance(node, ast.Call):
            continue
        func = node.func
        if isinstance(func, ast.Name):
            if func.id in _DYNAMIC_IMPORT_BUILTINS:
                return f"call to {func.id}()"
            if func.id == "getattr" and len(node.args) >= 2:
                attr = node.args[1]
                if not (isinstance(attr, ast.Constant) and isinstance(attr.value, str)):
                    return "getattr() with a non-literal attribute name"
        elif isinstance(func, ast.Attribute) and func.attr == "import_module":
            return "importlib.import_module()"
    return None


def verify_structure(candidate: str, baseline: KernelModule) -> LevelResult:
    """Level 2: required components, hardware validity, harness
    immutability, and the dynamic-import evasion scan. First failure wins."""

    def fail(diagnostic: str) -> LevelResult:
        return LevelResult(level="structure", passed=False, diagnostic=diagnostic)

    try:
        candidate_mod = KernelModule.from_source(candidate)
    except SyntaxError as exc:  # callers should have run verify_syntax first
        return fail(f"candidate does not parse: {exc}")
    tree = candidate_mod.tree

    # (a) required imports
    has_triton, has_language = _has_required_imports(tree)
    if not has_triton:
        return fail(
            "missing required kernel DSL import: add `import triton` at module top"
        )
    if not has_language:
        return fail(
            "missing required language submodule import: add "
            "`import triton.language as tl`"
        )

    # (b) at least one jit-decorated kernel function
    if not candidate_mod.kernel_regions:
        return fail(
            "no @triton.jit-decorated kernel function found; the module must "
            "keep at least one jit kernel"
        )

    # (c) the Model wrapper class
    if not any(
        isinstance(node, ast.ClassDef) and node.name == "Model" for node in tree.body
    ):
        return fail(
            "Model wrapper class missing; the benchmark harness requires a "
            "top-level `class Model` definition"
        )

    # (d) num_warps must come from the valid list
    for name, value in _iter_named_int_literals(tree):
        if name == "num_warps" and value not in VALID_NUM_WARPS:
            return fail(
                f"INVALID num_warps={value}: Must be a power of 2. "
                f"Valid values: {VALID_NUM_WARPS_TEXT}"
            )

    # (e) block dimensions: powers of two, at most 256
    for name, value in _iter_named_int_literals(tree):
        if name.startswith("BLOCK") and (not _is_pow2(value) or value > MAX_BLOCK_DIM):
            return fail(
                f"INVALID {name}={value}: Block dimensions must be powers of 2 "
                f"and at most {MAX_BLOCK_DIM}. Choose from 16, 32, 64, 128, 256."
            )

    # (f) harness immutability
    if candidate_mod.import_texts() != baseline.import_texts():
        return fail(
            "harness immutability violated: the import block differs from the "
            "baseline; imports are fixed by the benchmark specification"
        )
    candidate_named = {s.name: s for s in candidate_mod.named_harness_spans()}
    for span in baseline.named_harness_spans():
        other = candidate_named.get(span.name)
        if other is None:
            return fail(
                f"harness immutability violated: `{span.name}` was removed or "
                "renamed; the Model wrapper and input helpers must stay intact"
            )
        if other.text != span.text:
            return fail(
                f"harness immutability violated: `{span.name}` was modified; "
                "only @triton.jit kernel functions may change"
            )

    # (g) dynamic-import evasion
    hit = _scan_dynamic_access(tree)
    if hit is not None:
        return fail(
            f"dynamic module access rejected ({hit}); kernels must reference "
            "modules statically, with no reflection-based dispatch"
        )

    return LevelResult(level="structure", passed=True)


def default_variant(spec: ProblemSpec, prefer: str = "ci") -> str:
    for name in sorted(spec.variants):
        if spec.variants[name].group == prefer:
            return name
    return sorted(spec.variants)[0]


def verify_correctness(
    candidate: KernelModule,
    baseline: KernelModule,
    spec: ProblemSpec,
    runner,
    rtol: float,
    atol: float,
    variant: str | None = None,
    iterations: int = 1,
) -> LevelResult:
    """Level 3: identical-weight instantiation and elementwise closeness,
    delegated to the runner's compare operation."""
    variant = variant or default_variant(spec)
    reply = runner.compare(
        baseline.source,
        candidate.source,
        spec,
        variant,
        rtol=rtol,
        atol=atol,
        iterations=iterations,
        warmup=0,
    )
    if reply.shape_mismatch:
        return LevelResult(
            level="correctness",
            passed=False,
            diagnostic="output shape mismatch between candidate and reference; "
            "the kernel must preserve the original output contract",
        )
    if reply.nan:
        return LevelResult(
            level="correctness",
            passed=False,
            diagnostic="candidate output contains NaN; rejecting immediately. "
            "Check accumulator dtype and division/exp numerical ranges.",
        )
    if reply.inf_new:
        return LevelResult(
            level="correctness",
            passed=False,
            diagnostic="candidate output contains Inf where the original has none; "
            "check overflow in reduced-precision intermediates",
        )
    if not reply.correct:
        return LevelResult(
            level="correctness",
            passed=False,
            diagnostic=(
                "outputs differ beyond tolerance. Likely causes: wrong strides, "
                "transposed loads, missing boundary checks. "
                + reply.summary()
            ),
        )
    return LevelResult(level="correctness", passed=True)


PERFORMANCE_SUGGESTIONS = (
    "Consider: larger tiles for compute-bound shapes, GROUP_SIZE_M swizzling "
    "for L2 reuse, 32 warps with large GRF mode, or reducing redundant loads."
)


def verify_performance(
    candidate: KernelModule,
    baseline: KernelModule,
    spec: ProblemSpec,
    runner,
    variant: str | None = None,
    iterations: int = 100,
    warmup: int = 200,
) -> LevelResult:
    """Level 4: strict improvement. Equal timings never pass."""
    variant = variant or default_variant(spec)
    original_times = runner.bench(
        baseline.source, spec, variant, iterations=iterations, warmup=warmup
    )
    optimized_times = runner.bench(
        candidate.source, spec, variant, iterations=iterations, warmup=warmup
    )
    original_us = trim_mean(original_times) if len(original_times) >= 3 else sum(original_times) / len(original_times)
    optimized_us = trim_mean(optimized_times) if len(optimized_times) >= 3 else sum(optimized_times) / len(optimized_times)
    flops = spec.variant(variant).flops()
    original_tflops, _ = derive_metrics(flops, 0.0, original_us)
    optimized_tflops, _ = derive_metrics(flops, 0.0, optimized_us)
    speedup = original_us / optimized_us if optimized_us > 0 else float("inf")
    if optimized_us < original_us:
        return LevelResult(
            level="performance",
            passed=True,
            timings=(original_us, optimized_us),
            speedup=speedup,
        )
    return LevelResult(
        level="performance",
        passed=False,
        diagnostic=(
            f"not faster: original {original_us:.1f}us ({original_tflops:.3f} TFLOPS) "
            f"vs optimized {optimized_us:.1f}us ({optimized_tflops:.3f} TFLOPS), "
            f"speedup {speedup:.3f}x. "
            + PERFORMANCE_SUGGESTIONS
        ),
        timings=(original_us, optimized_us),
        speedup=speedup,
    )


class CascadeVerifier:
    """The compile_and_verify tool: runs the cascade against one baseline.

    ``verify()`` returns the success sentinel or a level-tagged diagnostic
    string (the shape the refinement agent consumes); ``report()`` returns
    the structured VerificationReport. Levels 3-4 hold the runner's
    serialization token because device access is exclusive.
    """

    name = "compile_and_verify"

    def __init__(
        self,
        baseline: KernelModule,
        spec: ProblemSpec,
        runner,
        variant: str | None = None,
        rtol: float = 1e-2,
        atol: float = 1e-5,
        sentinel: str = DEFAULT_SENTINEL,
        require_correctness: bool = True,
        perf_iterations: int = 100,
        perf_warmup: int = 200,
    ):
        self.baseline = baseline
        self.spec = spec
        self.runner = runner
        self.variant = variant or default_variant(spec)
        self.rtol = rtol
        self.atol = atol
        self.sentinel = sentinel
        self.require_correctness = require_correctness
        self.perf_iterations = perf_iterations
        self.perf_warmup = perf_warmup

    def report(self, candidate: str) -> VerificationReport:
        result = verify_syntax(candidate)
        if not result.passed:
            return VerificationReport("syntax", False, result.diagnostic)
        result = verify_structure(candidate, self.baseline)
        if not result.passed:
            return VerificationReport("structure", False, result.diagnostic)
        candidate_mod = KernelModule.from_source(candidate)
        with self.runner.lock:
            if self.require_correctness:
                result = verify_correctness(
                    candidate_mod,
                    self.baseline,
                    self.spec,
                    self.runner,
                    self.rtol,
                    self.atol,
                    variant=self.variant,
                )
                if not result.passed:
                    return VerificationReport("correctness", False, result.diagnostic)
            result = verify_performance(
                candidate_mod,
                self.baseline,
                self.spec,
                self.runner,
                variant=self.variant,
                iterations=self.perf_iterations,
                warmup=self.perf_warmup,
            )
        if not result.passed:
            return VerificationReport(
                "performance", False, result.diagnostic,
                timings=result.timings, speedup=result.speedup,
            )
        return VerificationReport(
            "success", True, timings=result.timings, speedup=result.speedup
        )

    def verify(self, candidate: str) -> str:
        report = self.report(candidate)
        if report.passed:
            return self.sentinel
        return f"{report.level_reached.upper()} FAILED: {report.diagnostic}"

    __call__ = verify
