"""Stage vocabulary shared by the whole pipeline.

Ten stage names exist: ``analysis`` plus nine optimization stages.
``analysis`` never appears in a plan; it only produces the issue inventory
that activates the other nine.
"""

ANALYSIS = "analysis"

# Default execution order; also the fallback plan when no LLM is available.
DEFAULT_SEQUENCE: tuple[str, ...] = (
    "algorithmic",
    "discovery",
    "dtype_fix",
    "fusion",
    "memory_access",
    "block_pointers",
    "persistent_kernel",
    "gpu_specific",
    "autotune",
)

OPTIMIZATION_STAGES: frozenset[str] = frozenset(DEFAULT_SEQUENCE)
ALL_STAGES: frozenset[str] = OPTIMIZATION_STAGES | {ANALYSIS}

# Hard ordering constraints (before, after), encoding decreasing semantic
# scope: structural rewrites first, parameter tuning last.
DEPENDENCY_EDGES: tuple[tuple[str, str], ...] = (
    ("algorithmic", "dtype_fix"),
    ("algorithmic", "fusion"),
    ("discovery", "dtype_fix"),
    ("discovery", "fusion"),
    ("dtype_fix", "fusion"),
    ("memory_access", "block_pointers"),
    ("fusion", "gpu_specific"),
    ("block_pointers", "gpu_specific"),
    ("gpu_specific", "autotune"),
)


def is_optimization_stage(name: str) -> bool:
    return name in OPTIMIZATION_STAGES
