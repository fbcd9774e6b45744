"""kernelsmith: multi-stage, LLM-assisted optimization of Triton GPU kernels.

The pipeline analyzes a kernel for typed optimization issues, plans a
dependency-constrained stage sequence, and drives a generate-verify-refine
agent per stage against a four-level verification cascade (syntax,
structure, correctness, performance). Measurement flows through a single
trusted runner so the optimizer can never shortcut the benchmark.
"""

__version__ = "0.1.0"
