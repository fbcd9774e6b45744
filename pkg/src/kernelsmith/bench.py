"""Benchmarking data contract: YAML problem specs, formula evaluation,
metric derivation, CSV logging, and kernel comparison.

A problem spec declares named input tensors with symbolic shapes and a set
of variants binding those symbols to concrete dimensions, each with FLOP
and byte formulas. All measurement flows through the runner interface (see
runners.py) so the optimizer never implements its own timing.
"""

from __future__ import annotations

import ast
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .issues import ProblemContext

logger = logging.getLogger(__name__)

TRANSFORMS = frozenset(
    {"scale", "softmax", "abs", "normalize", "symmetric", "triu", "tril",
     "transpose", "uniform", "rademacher"}
)

BACKENDS = ("pytorch", "pytorch_compile", "triton", "helion", "mlir")

VARIANT_GROUPS = ("ci", "bench_cpu", "bench_gpu")

DTYPE_BYTES = {
    "float16": 2, "bfloat16": 2, "float32": 4, "float64": 8,
    "int8": 1, "uint8": 1, "int16": 2, "int32": 4, "int64": 8, "bool": 1,
}


class SpecError(ValueError):
    """A problem spec failed validation; the message names the field."""


class FormulaError(ValueError):
    """A formula uses a construct outside the restricted grammar."""


class MetricError(ValueError):
    pass


_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.UAdd, ast.USub)


@dataclass(frozen=True)
class FormulaExpr:
    """Arithmetic over dimension symbols, restricted to + - * / ** at parse.

    Function calls, attribute access, comparisons, subscripts, and every
    other construct are rejected when the expression is built, not when it
    is evaluated.
    """

    expression: str

    def __post_init__(self):
        self._validate()

    def _validate(self) -> ast.Expression:
        try:
            tree = ast.parse(self.expression, mode="eval")
        except SyntaxError as exc:
            raise FormulaError(f"formula {self.expression!r} does not parse: {exc}") from exc
        for node in ast.walk(tree):
            if isinstance(node, ast.Expression):
                continue
            if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
                continue
            if isinstance(node, ast.UnaryOp) and isinstance(node.op, _ALLOWED_UNARY):
                continue
            if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
                continue
            if isinstance(node, ast.Name) and isinstance(node.ctx, ast.Load):
                continue
            if isinstance(node, _ALLOWED_BINOPS + _ALLOWED_UNARY + (ast.Load,)):
                continue
            raise FormulaError(
                f"formula {self.expression!r}: disallowed construct {type(node).__name__}"
            )
        return tree

    def symbols(self) -> set[str]:
        tree = self._validate()
        return {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}


def eval_formula(f: FormulaExpr, bindings: dict[str, float]) -> float:
    """Evaluate with real-valued division. Unbound symbols are errors."""
    tree = ast.parse(f.expression, mode="eval")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in bindings:
                raise FormulaError(f"unbound symbol {node.id!r} in {f.expression!r}")
            return bindings[node.id]
        if isinstance(node, ast.UnaryOp):
            value = ev(node.operand)
            return -value if isinstance(node.op, ast.USub) else +value
        if isinstance(node, ast.BinOp):
            left, right = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                return left / right
            if isinstance(node.op, ast.Pow):
                return left**right
        raise FormulaError(
            f"formula {f.expression!r}: disallowed construct {type(node).__name__}"
        )

    return ev(tree)


@dataclass
class InputDescriptor:
    name: str
    shape: list[FormulaExpr]
    dtype: str = "inherit"  # resolved at variant selection
    range: tuple[int, int] | None = None
    transforms: list[str] = field(default_factory=list)

    def symbols(self) -> set[str]:
        out: set[str] = set()
        for dim in self.shape:
            out |= dim.symbols()
        return out


@dataclass
class VariantSpec:
    name: str
    group: str  # ci | bench_cpu | bench_gpu
    dims: dict[str, int]
    dtype: str
    flops_formula: FormulaExpr
    bytes_formula: FormulaExpr

    def flops(self) -> float:
        return eval_formula(self.flops_formula, dict(self.dims))

    def bytes(self) -> float:
        return eval_formula(self.bytes_formula, dict(self.dims))


@dataclass
class ProblemSpec:
    name: str
    level: int
    inputs: list[InputDescriptor]
    variants: dict[str, VariantSpec]
    inits: dict = field(default_factory=dict)
    raw_yaml: str = ""

    def variant(self, name: str) -> VariantSpec:
        try:
            return self.variants[name]
        except KeyError:
            raise SpecError(
                f"spec {self.name}: unknown variant {name!r}; "
                f"have {sorted(self.variants)}"
            ) from None

    def input_shapes(self, variant: str) -> dict[str, list[int]]:
        v = self.variant(variant)
        bindings = {k: float(d) for k, d in v.dims.items()}
        return {
            inp.name: [int(eval_formula(dim, bindings)) for dim in inp.shape]
            for inp in self.inputs
        }


def parse_spec(yaml_text: str) -> ProblemSpec:
    """Parse and fully validate a problem spec document."""
    try:
        doc = yaml.safe_load(yaml_text)
    except yaml.YAMLError as exc:
        raise SpecError(f"spec is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("spec top level must be a mapping")
    try:
        name = str(doc["name"])
        level = int(doc.get("level", 1))
    except KeyError as exc:
        raise SpecError(f"spec missing required field {exc}") from exc

    inputs: list[InputDescriptor] = []
    for raw in doc.get("inputs") or []:
        input_name = str(raw.get("name", "?"))
        transforms = [str(t) for t in raw.get("transforms") or []]
        for t in transforms:
            if t not in TRANSFORMS:
                raise SpecError(
                    f"input {input_name!r}: unknown transform {t!r}; "
                    f"supported: {', '.join(sorted(TRANSFORMS))}"
                )
        shape = [FormulaExpr(str(dim)) for dim in raw.get("shape") or []]
        rng = raw.get("range")
        if rng is not None:
            if not (isinstance(rng, (list, tuple)) and len(rng) == 2):
                raise SpecError(f"input {input_name!r}: range must be [low, high]")
            rng = (int(rng[0]), int(rng[1]))
        inputs.append(
            InputDescriptor(
                name=input_name,
                shape=shape,
                dtype=str(raw.get("dtype", "inherit")),
                range=rng,
                transforms=transforms,
            )
        )

    used_symbols: set[str] = set()
    for inp in inputs:
        used_symbols |= inp.symbols()

    variants: dict[str, VariantSpec] = {}
    for vname, raw in (doc.get("variants") or {}).items():
        vname = str(vname)
        group = str(raw.get("group", "ci")).replace("-", "_")
        if group not in VARIANT_GROUPS:
            raise SpecError(f"variant {vname!r}: unknown group {group!r}")
        dims = {str(k): int(v) for k, v in (raw.get("dims") or {}).items()}
        unbound = used_symbols - set(dims)
        if unbound:
            raise SpecError(
                f"variant {vname!r}: input symbols not bound by dims: {sorted(unbound)}"
            )
        dtype = str(raw.get("dtype", "float32"))
        if dtype not in DTYPE_BYTES:
            raise SpecError(f"variant {vname!r}: unknown dtype {dtype!r}")
        try:
            flops_formula = FormulaExpr(str(raw.get("flops", "0")))
            bytes_formula = FormulaExpr(str(raw.get("bytes", "0")))
        except FormulaError as exc:
            raise SpecError(f"variant {vname!r}: {exc}") from exc
        for which, formula in (("flops", flops_formula), ("bytes", bytes_formula)):
            loose = formula.symbols() - set(dims)
            if loose:
                raise SpecError(
                    f"variant {vname!r}: {which} formula references unbound "
                    f"symbols {sorted(loose)}"
                )
        variants[vname] = VariantSpec(
            name=vname,
            group=group,
            dims=dims,
            dtype=dtype,
            flops_formula=flops_formula,
            bytes_formula=bytes_formula,
        )

    return ProblemSpec(
        name=name,
        level=level,
        inputs=inputs,
        variants=variants,
        inits=doc.get("inits") or {},
        raw_yaml=yaml_text,
    )


def load_spec(path: str | Path) -> ProblemSpec:
    return parse_spec(Path(path).read_text())


def context_for_variant(spec: ProblemSpec, variant: str) -> ProblemContext:
    v = spec.variant(variant)
    return ProblemContext(
        shapes=spec.input_shapes(variant),
        flop_count=v.flops(),
        dtype=v.dtype,
    )


def derive_metrics(flop_count: float, byte_count: float, time_us: float) -> tuple[float, float]:
    """TFLOPS = FLOP / (t_us * 1e6); bandwidth GB/s = bytes / (t_us * 1e3)."""
    if time_us <= 0:
        raise MetricError(f"time must be positive, got {time_us}")
    return flop_count / (time_us * 1e6), byte_count / (time_us * 1e3)


def trim_mean(times_us: list[float]) -> float:
    """Mean after removing exactly one minimal and one maximal element."""
    if len(times_us) < 3:
        raise MetricError(f"trim_mean needs >= 3 samples, got {len(times_us)}")
    ordered = sorted(times_us)
    trimmed = ordered[1:-1]
    return sum(trimmed) / len(trimmed)


# --- CSV logging -----------------------------------------------------------

FIXED_COLUMNS = (
    "kernel_name", "backend", "level", "flop_count", "tflops", "bytes",
    "bandwidth_gbps", "time_us", "input_dims_json", "note",
)

ESTIMATE_MARKER = "[estimated]"


class CsvLogError(IOError):
    pass


@dataclass
class BenchRecord:
    kernel_name: str
    backend: str
    level: int
    flop_count: float
    tflops: float
    bytes: float
    bandwidth_gbps: float
    time_us: float
    input_dims_json: str = "{}"
    note: str = ""
    estimated: bool = False
    env_columns: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; valid: {BACKENDS}")

    @classmethod
    def from_measurement(
        cls,
        spec: ProblemSpec,
        variant: str,
        backend: str,
        time_us: float,
        note: str = "",
        flop_count: float | None = None,
        byte_count: float | None = None,
        estimated: bool = False,
    ) -> "BenchRecord":
        v = spec.variant(variant)
        flop_count = v.flops() if flop_count is None else flop_count
        byte_count = v.bytes() if byte_count is None else byte_count
        tflops, bandwidth = derive_metrics(flop_count, byte_count, time_us)
        return cls(
            kernel_name=spec.name,
            backend=backend,
            level=spec.level,
            flop_count=flop_count,
            tflops=tflops,
            bytes=byte_count,
            bandwidth_gbps=bandwidth,
            time_us=time_us,
            input_dims_json=json.dumps(v.dims, sort_keys=True),
            note=note,
            estimated=estimated,
        )


def capture_env_columns(env: dict[str, str] | None = None) -> dict[str, str]:
    env = dict(os.environ) if env is None else env
    return {k: v for k, v in env.items() if k.startswith("AIBENCH_")}


def log_record(rec: BenchRecord, sink: str | Path) -> list[str]:
    """Append one row; header written once per file.

    Environment variables prefixed AIBENCH_ become extra columns. A file
    whose existing header disagrees with the computed column set is refused
    rather than silently mangled. Returns the row as written. Estimated
    metrics get the warning marker appended to the note column.
    """
    sink = Path(sink)
    env_cols = dict(capture_env_columns())
    env_cols.update(rec.env_columns)
    columns = list(FIXED_COLUMNS) + sorted(env_cols)

    note = rec.note
    if rec.estimated:
        note = f"{note} {ESTIMATE_MARKER}".strip()
    row = [
        rec.kernel_name, rec.backend, str(rec.level), repr(rec.flop_count),
        repr(rec.tflops), repr(rec.bytes), repr(rec.bandwidth_gbps),
        repr(rec.time_us), rec.input_dims_json, note,
    ] + [env_cols[k] for k in sorted(env_cols)]

    write_header = True
    if sink.exists() and sink.stat().st_size > 0:
        with open(sink, newline="") as fh:
            existing = next(csv.reader(fh), None)
        if existing != columns:
            raise CsvLogError(
                f"{sink}: column set drift (file has {existing}, record needs {columns})"
            )
        write_header = False
    try:
        with open(sink, "a", newline="") as fh:
            writer = csv.writer(fh)
            if write_header:
                writer.writerow(columns)
            writer.writerow(row)
    except OSError as exc:
        raise CsvLogError(f"cannot append to {sink}: {exc}") from exc
    return row


def read_records(sink: str | Path) -> list[dict[str, str]]:
    with open(sink, newline="") as fh:
        return list(csv.DictReader(fh))


# --- comparison ------------------------------------------------------------


@dataclass
class ComparisonResult:
    original_us: float
    optimized_us: float
    speedup: float
    correct: bool
    feedback: str


def _representative_us(times: list[float]) -> float:
    if len(times) >= 3:
        return trim_mean(times)
    return sum(times) / len(times)


def compare_kernels(
    original,
    optimized,
    spec: ProblemSpec,
    variant: str,
    runner,
    rtol: float = 1e-2,
    atol: float = 1e-5,
    iterations: int = 10,
    warmup: int = 2,
) -> ComparisonResult:
    """Run both modules through the runner and assemble a ComparisonResult.

    ``original``/``optimized`` are KernelModule objects (anything exposing
    ``.source``). Transport failures propagate as RunnerTransportError.
    """
    with runner.lock:
        reply = runner.compare(
            original.source,
            optimized.source,
            spec,
            variant,
            rtol=rtol,
            atol=atol,
            iterations=iterations,
            warmup=warmup,
        )
    original_us = _representative_us(reply.original_times_us)
    optimized_us = _representative_us(reply.optimized_times_us)
    speedup = original_us / optimized_us if optimized_us > 0 else float("inf")
    if reply.correct:
        feedback = (
            f"correct; original {original_us:.1f}us vs optimized "
            f"{optimized_us:.1f}us (speedup {speedup:.3f}x)"
        )
    else:
        feedback = f"INCORRECT: {reply.summary()}"
    return ComparisonResult(
        original_us=original_us,
        optimized_us=optimized_us,
        speedup=speedup,
        correct=reply.correct,
        feedback=feedback,
    )
