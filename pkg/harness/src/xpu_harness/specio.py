"""Problem-spec parsing, harness side.

The harness receives the spec YAML over the wire and extracts just what
execution needs: input descriptors, constructor args, and per-variant
dimension/dtype bindings. Shape expressions are arithmetic over dimension
symbols, evaluated by a safe AST walker restricted to + - * / **.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field

import torch
import yaml

from .errors import SpecError

TRANSFORMS = frozenset(
    {"scale", "softmax", "abs", "normalize", "symmetric", "triu", "tril",
     "transpose", "uniform", "rademacher"}
)

TORCH_DTYPES = {
    "float16": torch.float16,
    "bfloat16": torch.bfloat16,
    "float32": torch.float32,
    "float64": torch.float64,
    "int8": torch.int8,
    "uint8": torch.uint8,
    "int16": torch.int16,
    "int32": torch.int32,
    "int64": torch.int64,
    "bool": torch.bool,
}

_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)


def eval_dim_expr(expression: str, dims: dict[str, int]) -> int:
    try:
        tree = ast.parse(expression, mode="eval")
    except SyntaxError as exc:
        raise SpecError(f"shape expression {expression!r} does not parse: {exc}") from exc

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in dims:
                raise SpecError(f"unbound dimension symbol {node.id!r} in {expression!r}")
            return dims[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.UAdd, ast.USub)):
            value = ev(node.operand)
            return -value if isinstance(node.op, ast.USub) else value
        if isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
            left, right = ev(node.left), ev(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                return left / right
            return left**right
        raise SpecError(
            f"shape expression {expression!r}: disallowed construct {type(node).__name__}"
        )

    value = ev(tree)
    result = int(value)
    if result != value or result < 1:
        raise SpecError(f"shape expression {expression!r} evaluated to non-positive/non-integer {value}")
    return result


@dataclass
class InputDesc:
    name: str
    shape: list[str]
    dtype: str = "inherit"
    range: tuple[int, int] | None = None
    transforms: list[str] = field(default_factory=list)

    def resolved_dtype(self, variant_dtype: str) -> torch.dtype:
        name = variant_dtype if self.dtype == "inherit" else self.dtype
        if name not in TORCH_DTYPES:
            raise SpecError(f"input {self.name!r}: unknown dtype {name!r}")
        return TORCH_DTYPES[name]

    def concrete_shape(self, dims: dict[str, int]) -> list[int]:
        return [eval_dim_expr(str(dim), dims) for dim in self.shape]


@dataclass
class Variant:
    name: str
    group: str
    dims: dict[str, int]
    dtype: str


@dataclass
class HarnessSpec:
    name: str
    inputs: list[InputDesc]
    variants: dict[str, Variant]
    inits: dict = field(default_factory=dict)

    def variant(self, name: str) -> Variant:
        if name not in self.variants:
            raise SpecError(f"unknown variant {name!r}; have {sorted(self.variants)}")
        return self.variants[name]


def parse_spec(yaml_text: str) -> HarnessSpec:
    try:
        doc = yaml.safe_load(yaml_text)
    except yaml.YAMLError as exc:
        raise SpecError(f"spec is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or "name" not in doc:
        raise SpecError("spec must be a mapping with a name")

    inputs = []
    for raw in doc.get("inputs") or []:
        transforms = [str(t) for t in raw.get("transforms") or []]
        unknown = [t for t in transforms if t not in TRANSFORMS]
        if unknown:
            raise SpecError(f"input {raw.get('name')!r}: unknown transforms {unknown}")
        rng = raw.get("range")
        inputs.append(
            InputDesc(
                name=str(raw["name"]),
                shape=[str(dim) for dim in raw.get("shape") or []],
                dtype=str(raw.get("dtype", "inherit")),
                range=(int(rng[0]), int(rng[1])) if rng else None,
                transforms=transforms,
            )
        )

    variants = {}
    for vname, raw in (doc.get("variants") or {}).items():
        variants[str(vname)] = Variant(
            name=str(vname),
            group=str(raw.get("group", "ci")).replace("-", "_"),
            dims={str(k): int(v) for k, v in (raw.get("dims") or {}).items()},
            dtype=str(raw.get("dtype", "float32")),
        )

    return HarnessSpec(
        name=str(doc["name"]),
        inputs=inputs,
        variants=variants,
        inits=doc.get("inits") or {},
    )
