"""Command-line interface exposing every subsystem.

Exit codes: 0 success, 1 infrastructure or verification failure (message
names the typed error class), 2 usage errors (argparse).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import bench, knowledge
from .hardware import (
    GrfMode,
    detect_gpu,
    generate_autotune_grid,
    get_optimal_params,
    render_autotune_decorator,
)
from .issues import route
from .kernelmod import KernelModule
from .llm import OVERFLOW, HttpChatBackend, ScriptedBackend, ServiceConfig
from .pipeline import PipelineConfig, optimize
from .planner import fallback_plan
from .runners import MockRunner, MockScenario, SubprocessRunner
from .verify import default_variant, verify_structure, verify_syntax

logger = logging.getLogger(__name__)


def _load_scripted_backend(path: str) -> ScriptedBackend:
    """Script file: JSON array; strings are responses, {"overflow": true}
    injects a context-overflow fault."""
    entries = json.loads(Path(path).read_text())
    script = []
    for entry in entries:
        if isinstance(entry, dict) and entry.get("overflow"):
            script.append(OVERFLOW)
        else:
            script.append(str(entry))
    return ScriptedBackend(script)


def _build_backend(args) -> object:
    if getattr(args, "script", None):
        return _load_scripted_backend(args.script)
    endpoint = ServiceConfig.from_env()
    if getattr(args, "model", None):
        endpoint.model = args.model
    if getattr(args, "api_base", None):
        endpoint.base_url = args.api_base
    return HttpChatBackend(endpoint)


def _load_mock_runner(path: str | None) -> MockRunner:
    if path is None:
        return MockRunner(default=MockScenario())
    doc = yaml.safe_load(Path(path).read_text()) or {}
    default = None
    if "default" in doc:
        default = MockScenario(**doc["default"])
    runner = MockRunner(default=default)
    for entry in doc.get("modules") or []:
        entry = dict(entry)
        variant = entry.pop("variant")
        if "code_file" in entry:
            code = Path(entry.pop("code_file")).read_text()
        else:
            code = entry.pop("code")
        runner.add(code, variant, MockScenario(**entry))
    return runner


def _build_runner(args, config: PipelineConfig):
    if args.runner == "subprocess":
        argv = args.harness_cmd.split() if getattr(args, "harness_cmd", None) else None
        return SubprocessRunner(device=config.device_name, harness_argv=argv)
    return _load_mock_runner(getattr(args, "scenarios", None))


def _add_backend_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--script", help="JSON file of scripted LLM responses (testing)")
    parser.add_argument("--model", help="override LLM_MODEL")
    parser.add_argument("--api-base", help="override OPENAI_API_BASE")


def _add_runner_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--runner", choices=("mock", "subprocess"), default="mock")
    parser.add_argument("--scenarios", help="YAML scenario table for the mock runner")
    parser.add_argument("--harness-cmd", help="override harness launch command")
    parser.add_argument("--device", default=None, help="device name (default: env XPU_DEVICE)")


def cmd_optimize(args) -> int:
    overrides = {}
    if args.max_iterations is not None:
        overrides["max_iterations_per_stage"] = args.max_iterations
    if args.best_k is not None:
        overrides["best_k"] = args.best_k
    if args.rtol is not None:
        overrides["rtol"] = args.rtol
    if args.atol is not None:
        overrides["atol"] = args.atol
    if args.device is not None:
        overrides["device_name"] = args.device
    config = PipelineConfig.from_env(
        kb_dir=Path(args.kb_dir),
        output_dir=Path(args.output_dir),
        runner=args.runner,
        bench_iterations=args.iterations,
        bench_warmup=args.warmup,
        **overrides,
    )
    llm = _build_backend(args)
    runner = _build_runner(args, config)
    try:
        result = optimize(
            args.kernel, args.spec, args.variant, config,
            llm=llm, runner=runner, csv_path=args.csv,
        )
    finally:
        if hasattr(runner, "close"):
            runner.close()
    print(json.dumps(result.report, indent=2))
    return 0


def cmd_analyze(args) -> int:
    from .bench import context_for_variant, load_spec
    from .issues import analyze

    source = Path(args.kernel).read_text()
    syntax = verify_syntax(source)
    if not syntax.passed:
        print(f"SyntaxError: {syntax.diagnostic}", file=sys.stderr)
        return 1
    module = KernelModule.from_source(source)
    spec = load_spec(args.spec)
    variant = args.variant or default_variant(spec)
    kb = knowledge.load_knowledge(args.kb_dir)
    report = analyze(module, None, kb, context_for_variant(spec, variant), _build_backend(args))
    print(
        json.dumps(
            {
                "kernel_fingerprint": report.kernel_fingerprint,
                "issues": [
                    {
                        "type": i.type.name,
                        "stage": i.type.stage,
                        "severity": i.severity,
                        "description": i.description,
                        "suggested_fix": i.suggested_fix,
                        "estimated_speedup": list(i.estimated_speedup),
                    }
                    for i in report.issues
                ],
                "diagnostics": report.diagnostics,
            },
            indent=2,
        )
    )
    return 0


def cmd_plan(args) -> int:
    issue_types = [t.strip() for t in args.issues.split(",") if t.strip()]
    active = {route(t) for t in issue_types}
    order = fallback_plan(active)
    print("[" + ", ".join(order) + "]")
    return 0


def cmd_validate(args) -> int:
    source = Path(args.kernel).read_text()
    result = verify_syntax(source)
    if not result.passed:
        print(f"SYNTAX FAILED: {result.diagnostic}", file=sys.stderr)
        return 1
    baseline_source = Path(args.baseline).read_text() if args.baseline else source
    baseline = KernelModule.from_source(baseline_source)
    result = verify_structure(source, baseline)
    if not result.passed:
        print(f"STRUCTURE FAILED: {result.diagnostic}", file=sys.stderr)
        return 1
    print("OK: syntax and structure checks passed")
    return 0


def cmd_bench_compare(args) -> int:
    spec = bench.load_spec(args.spec)
    variant = args.variant or default_variant(spec)
    config = PipelineConfig.from_env(runner=args.runner)
    if args.device is not None:
        config.device_name = args.device
    runner = _build_runner(args, config)
    try:
        result = bench.compare_kernels(
            KernelModule.from_source(Path(args.original).read_text()),
            KernelModule.from_source(Path(args.optimized).read_text()),
            spec,
            variant,
            runner,
            rtol=args.rtol or 1e-2,
            atol=args.atol or 1e-5,
            iterations=args.iterations,
        )
    finally:
        if hasattr(runner, "close"):
            runner.close()
    print(
        json.dumps(
            {
                "original_us": result.original_us,
                "optimized_us": result.optimized_us,
                "speedup": result.speedup,
                "correct": result.correct,
                "feedback": result.feedback,
            },
            indent=2,
        )
    )
    return 0


def cmd_kb_lint(args) -> int:
    kb = knowledge.load_knowledge(args.kb_dir)
    print(
        f"{len(kb.constraints)} constraints, {len(kb.patterns)} patterns, "
        f"{len(kb.examples)} examples"
    )
    for line in kb.diagnostics:
        print(f"  diagnostic: {line}")
    return 0


def cmd_grid(args) -> int:
    if args.gpu_config:
        profile = detect_gpu("config_file", Path(args.gpu_config).read_text())
    elif args.smi_json:
        profile = detect_gpu("smi_json", Path(args.smi_json).read_text())
    else:
        profile = detect_gpu()
    grid = generate_autotune_grid(profile, args.m, args.n, args.k, args.bytes_per_element)
    grf = GrfMode.large() if args.grf == "large" else GrfMode.small()
    best = get_optimal_params(profile, grf, args.m, args.n, args.k, args.bytes_per_element)
    print(f"# profile family: {profile.family}")
    print(
        f"# optimal ({args.grf} GRF): BLOCK_M={best.block_m} BLOCK_N={best.block_n} "
        f"BLOCK_K={best.block_k} GROUP_SIZE_M={best.group_size_m} "
        f"num_warps={best.num_warps} num_stages={best.num_stages}"
    )
    print(render_autotune_decorator(grid))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernelsmith",
        description="Multi-stage LLM-assisted Triton kernel optimization",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the full optimization pipeline")
    p.add_argument("kernel")
    p.add_argument("spec")
    p.add_argument("--variant")
    p.add_argument("--kb-dir", default="knowledge")
    p.add_argument("--output-dir", default="kernelsmith_out")
    p.add_argument("--best-k", type=int, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--rtol", type=float, default=None)
    p.add_argument("--atol", type=float, default=None)
    p.add_argument("--iterations", type=int, default=100, help="benchmark iterations")
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--csv", default=None, help="CSV results path")
    _add_backend_flags(p)
    _add_runner_flags(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("analyze", help="print the typed issue inventory")
    p.add_argument("kernel")
    p.add_argument("spec")
    p.add_argument("--variant")
    p.add_argument("--kb-dir", default="knowledge")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="print the stage plan for given issue types")
    p.add_argument("--issues", required=True, help="comma-separated issue types")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("validate", help="syntax + structure checks only")
    p.add_argument("kernel")
    p.add_argument("--baseline", help="baseline module for harness checks (default: kernel itself)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bench-compare", help="compare two kernels through the runner")
    p.add_argument("original")
    p.add_argument("optimized")
    p.add_argument("spec")
    p.add_argument("--variant")
    p.add_argument("--rtol", type=float)
    p.add_argument("--atol", type=float)
    p.add_argument("--iterations", type=int, default=10)
    _add_runner_flags(p)
    p.set_defaults(func=cmd_bench_compare)

    p = sub.add_parser("kb-lint", help="load the knowledge base and report diagnostics")
    p.add_argument("--kb-dir", default="knowledge")
    p.set_defaults(func=cmd_kb_lint)

    p = sub.add_parser("grid", help="print the autotune grid for a problem shape")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--bytes-per-element", type=int, default=2)
    p.add_argument("--grf", choices=("large", "small"), default="large")
    p.add_argument("--gpu-config", help="flat YAML profile file")
    p.add_argument("--smi-json", help="xpu-smi JSON capture")
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except Exception as exc:  # typed errors exit 1 with their class name
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
