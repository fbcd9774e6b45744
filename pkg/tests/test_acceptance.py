"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines. Every tolerance is pinned here, not deferred.
"""

import json
import math
import random
import shutil
import time
from pathlib import Path

import pytest

from kernelsmith.bench import FormulaError, FormulaExpr, derive_metrics, eval_formula, trim_mean
from kernelsmith.cover import CoverTask, run_cover
from kernelsmith.hardware import (
    GRID_LIMIT,
    GpuProfile,
    GrfMode,
    generate_autotune_grid,
    get_optimal_params,
)
from kernelsmith.kernelmod import KernelModule
from kernelsmith.knowledge import format_for_llm, load_knowledge
from kernelsmith.llm import OVERFLOW, ScriptedBackend
from kernelsmith.pipeline import PipelineConfig, optimize
from kernelsmith.planner import plan
from kernelsmith.runners import MockRunner, MockScenario
from kernelsmith.stages import DEFAULT_SEQUENCE, DEPENDENCY_EDGES, OPTIMIZATION_STAGES
from kernelsmith.verify import CascadeVerifier, verify_structure, verify_syntax

from .conftest import BASE_KERNEL, REPO_ROOT, llm_code_response, splice_into_kernel
from .oracles import eval_formula_oracle, random_formula, trim_mean_oracle

GPU = GpuProfile(family="arc_pro", max_compute_units=32, global_memory_bytes=32 * 1024**3)
BASELINE = KernelModule.from_source(BASE_KERNEL)


def announce(criterion: str) -> None:
    print(f"ACCEPTANCE PASS: {criterion}")


def make_cascade(matmul_spec, runner) -> CascadeVerifier:
    return CascadeVerifier(
        BASELINE, matmul_spec, runner, variant="ci_small",
        perf_iterations=5, perf_warmup=0,
    )


def test_planner_soundness():
    start = time.monotonic()
    stages = list(DEFAULT_SEQUENCE)
    for bits in range(2 ** len(stages)):
        active = {s for i, s in enumerate(stages) if bits & (1 << i)}
        result = plan(active)
        assert sorted(result.ordered_stages) == sorted(active)
        index = {s: i for i, s in enumerate(result.ordered_stages)}
        for before, after in DEPENDENCY_EDGES:
            if before in index and after in index:
                assert index[before] < index[after]
    assert plan(set(OPTIMIZATION_STAGES)).ordered_stages == list(DEFAULT_SEQUENCE)
    elapsed = time.monotonic() - start
    assert elapsed < 1.0, f"planner sweep took {elapsed:.2f}s"
    announce(f"planner soundness (512 subsets, {elapsed:.2f}s)")


def _fuzz_scenario(rng: random.Random, index: int, matmul_spec):
    """One randomized refinement scenario; returns (llm, cascade, task, runner)."""
    T = rng.randint(1, 4)
    kind = rng.choice(["pass_at_i", "never_pass", "overflow_then_pass",
                       "fallback_pass", "fallback_fail"])
    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1000.0]))

    def candidate(tag: str, mode: str) -> str:
        """mode: pass | structure | correctness | performance"""
        if mode == "structure":
            source = splice_into_kernel(BASE_KERNEL, f"    num_warps = 24  # {index}-{tag}")
            runner.add(source, "ci_small", MockScenario(times_us=[900.0]))
            return source
        source = splice_into_kernel(BASE_KERNEL, f"    # {index}-{tag}")
        if mode == "correctness":
            runner.add(source, "ci_small", MockScenario(times_us=[900.0], correct=False))
        elif mode == "performance":
            runner.add(source, "ci_small", MockScenario(times_us=[rng.choice([1000.0, 1500.0])]))
        else:
            runner.add(source, "ci_small", MockScenario(times_us=[500.0]))
        return source

    fail_mode = lambda: rng.choice(["structure", "correctness", "performance"])
    script = []
    if kind == "pass_at_i":
        win = rng.randint(1, T)
        for i in range(win - 1):
            script.append(llm_code_response(candidate(f"f{i}", fail_mode())))
        script.append(llm_code_response(candidate("win", "pass")))
    elif kind == "overflow_then_pass" and T >= 3:
        script.append(llm_code_response(candidate("f0", fail_mode())))
        script.append(llm_code_response(candidate("f1", fail_mode())))
        script.append(OVERFLOW)
        script.append(llm_code_response(candidate("win", "pass")))
    elif kind in ("never_pass", "fallback_fail"):
        for i in range(T):
            script.append(llm_code_response(candidate(f"f{i}", fail_mode())))
        script.append(llm_code_response(candidate("fb", fail_mode())))
    elif kind == "fallback_pass":
        for i in range(T):
            script.append(llm_code_response(candidate(f"f{i}", fail_mode())))
        script.append(llm_code_response(candidate("fb", "pass")))
    else:  # overflow kind drawn with T < 3: degenerate to pass_at_1
        script.append(llm_code_response(candidate("win", "pass")))

    llm = ScriptedBackend(script)
    task = CoverTask(
        original_code=BASE_KERNEL, current_code=BASE_KERNEL, stage="dtype_fix",
        issues=[], knowledge="", gpu=GPU, max_iterations=T,
    )
    return llm, make_cascade(matmul_spec, runner), task


def test_cover_safety_fuzz(matmul_spec, tmp_path):
    start = time.monotonic()
    rng = random.Random(20260810)
    for index in range(500):
        llm, cascade, task = _fuzz_scenario(rng, index, matmul_spec)
        outcome = run_cover(task, llm, cascade.verify, output_dir=tmp_path)
        if outcome.code != BASE_KERNEL:
            assert cascade.verify(outcome.code) == task.success_sentinel, (
                f"scenario {index}: outcome neither original nor cascade-passing"
            )
        assert llm.completed_calls <= task.max_iterations + 1, (
            f"scenario {index}: {llm.completed_calls} generation calls "
            f"> T+1 = {task.max_iterations + 1}"
        )
    elapsed = time.monotonic() - start
    assert elapsed < 30.0, f"fuzz took {elapsed:.1f}s"
    announce(f"CoVeR safety fuzz (500 scenarios, {elapsed:.1f}s)")


def test_cascade_gating():
    from kernelsmith.bench import load_spec

    spec = load_spec(REPO_ROOT / "specs" / "matmul_relu.yaml")
    rng = random.Random(99)
    for index in range(100):
        kind = rng.choice(["structure", "correctness", "performance", "pass"])
        runner = MockRunner()
        runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1000.0]))
        cascade = make_cascade(spec, runner)
        if kind == "structure":
            source = splice_into_kernel(BASE_KERNEL, f"    BLOCK_BAD = 48  # {index}")
            report = cascade.report(source)
            assert report.level_reached == "structure"
            assert runner.count("compare") == 0 and runner.count("bench") == 0
        elif kind == "correctness":
            source = splice_into_kernel(BASE_KERNEL, f"    # wrong-{index}")
            runner.add(source, "ci_small", MockScenario(times_us=[1.0], correct=False))
            report = cascade.report(source)
            assert report.level_reached == "correctness"
            assert runner.count("bench") == 0
        elif kind == "performance":
            source = splice_into_kernel(BASE_KERNEL, f"    # slow-{index}")
            runner.add(source, "ci_small", MockScenario(times_us=[2000.0]))
            report = cascade.report(source)
            assert report.level_reached == "performance"
            assert runner.count("compare") == 1 and runner.count("bench") == 2
        else:
            source = splice_into_kernel(BASE_KERNEL, f"    # fast-{index}")
            runner.add(source, "ci_small", MockScenario(times_us=[500.0]))
            assert cascade.report(source).passed

    # the canonical hardware-validity diagnostic, byte for byte
    bad = splice_into_kernel(BASE_KERNEL, "    num_warps = 24")
    result = verify_structure(bad, BASELINE)
    assert (
        "INVALID num_warps=24: Must be a power of 2. Valid values: 1, 2, 4, 8, 16, 32"
        in result.diagnostic
    )
    announce("cascade gating (100 fixtures + verbatim num_warps diagnostic)")


def test_tuning_invariants():
    start = time.monotonic()
    rng = random.Random(4242)
    families = sorted({"arc_pro", "arc", "integrated", "unknown"})
    for draw in range(10_000):
        m = rng.randint(1, 16384)
        n = rng.randint(1, 16384)
        k = rng.randint(1, 16384)
        bpe = rng.choice([1, 2, 4, 8])
        grf = GrfMode.large() if rng.random() < 0.5 else GrfMode.small()
        profile = GpuProfile(family=rng.choice(families), max_compute_units=rng.choice([8, 16, 32]))
        params = get_optimal_params(profile, grf, m, n, k, bpe)
        assert params.tile_memory_bytes(bpe) <= grf.capacity_bytes
        for block, dim in ((params.block_m, m), (params.block_n, n), (params.block_k, k)):
            assert block >= 1 and (block & (block - 1)) == 0 and block <= 256
            assert block <= 2 ** max(0, (dim - 1).bit_length())
            if dim >= 16:
                assert block <= dim
        assert params.num_warps in (1, 2, 4, 8, 16, 32)

        if draw % 5 == 0:  # grid generation is ~20x the work of one params call
            grid = generate_autotune_grid(profile, m, n, k, bpe)
            assert len(grid.configs) <= GRID_LIMIT
            assert len(set(grid.configs)) == len(grid.configs)
            if len(grid.configs) >= 2:
                assert {c.grf_mode.mode for c in grid.configs} == {"large", "small"}
            for config in grid.configs:
                assert config.tile_memory_bytes(bpe) <= config.grf_mode.capacity_bytes
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"tuning sweep took {elapsed:.2f}s"
    announce(f"tuning invariants (10,000 draws + 2,000 grids, {elapsed:.2f}s)")


def test_metric_formulas():
    rng = random.Random(7)
    for _ in range(100):
        flops = rng.uniform(1, 1e15)
        byte_count = rng.uniform(1, 1e12)
        t = rng.uniform(1e-3, 1e7)
        tflops, bandwidth = derive_metrics(flops, byte_count, t)
        assert math.isclose(tflops, flops / (t * 1e6), rel_tol=1e-12)
        assert math.isclose(bandwidth, byte_count / (t * 1e3), rel_tol=1e-12)
    for _ in range(200):
        times = [rng.uniform(0, 1e6) for _ in range(rng.randint(3, 50))]
        assert trim_mean(times) == trim_mean_oracle(times)
    announce("metric formulas (100 draws < 1e-12; trim_mean == sort oracle)")


INJECTION_FIXTURES = [
    "__import__('os')",
    "__import__('os').system('true')",
    "open('/etc/passwd')",
    "M.bit_length()",
    "M.real",
    "M if N else K",
    "M > N",
    "M < N",
    "M == N",
    "M != N",
    "[1, 2][0]",
    "(1, 2)",
    "{'a': 1}",
    "lambda: 1",
    "M; N",
    "f'{M}'",
    "M @ N",
    "M | N",
    "M << 2",
    "not M",
]


def test_formula_evaluator_agreement():
    assert len(INJECTION_FIXTURES) == 20
    for fixture in INJECTION_FIXTURES:
        with pytest.raises(FormulaError):
            FormulaExpr(fixture)

    rng = random.Random(1001)
    bindings = {"M": 13, "N": 5, "K": 211}
    checked = 0
    for _ in range(1000):
        expression = random_formula(rng, ["M", "N", "K"])
        try:
            expected = eval_formula_oracle(expression, bindings)
        except (ZeroDivisionError, OverflowError):
            with pytest.raises((ZeroDivisionError, OverflowError)):
                eval_formula(FormulaExpr(expression), bindings)
            continue
        actual = eval_formula(FormulaExpr(expression), bindings)
        if isinstance(expected, int):
            assert actual == expected, expression
        else:
            assert math.isclose(actual, expected, rel_tol=1e-12, abs_tol=1e-15), expression
        checked += 1
    assert checked > 800
    announce(f"formula evaluator ({checked} expressions vs oracle; 20 injections rejected)")


def test_harness_immutability():
    rng = random.Random(31337)

    for trial in range(200):
        token = f"s{trial}_{rng.randint(0, 10**9)}"
        text = rng.choice([f"    # {token}", f"    _{token} = {rng.choice([1, 2, 4])}"])
        candidate = splice_into_kernel(BASE_KERNEL, text, kernel_index=rng.randrange(2))
        result = verify_structure(candidate, BASELINE)
        assert result.passed, f"splice {trial}: {result.diagnostic}"

    lines = BASE_KERNEL.split("\n")
    harness_positions = []
    for span in BASELINE.harness_region:
        for line_number in range(span.start_line, span.end_line + 1):
            line = lines[line_number - 1]
            for col in range(len(line)):
                harness_positions.append((line_number - 1, col))
    failures = 0
    trials = 0
    while trials < 200:
        line_index, col = harness_positions[rng.randrange(len(harness_positions))]
        line = lines[line_index]
        replacement = rng.choice("qzXj419#")
        if line[col] == replacement:
            continue
        trials += 1
        edited = line[:col] + replacement + line[col + 1:]
        candidate = "\n".join(lines[:line_index] + [edited] + lines[line_index + 1:])
        if not verify_syntax(candidate).passed:
            failures += 1  # rejected even before structure
            continue
        result = verify_structure(candidate, BASELINE)
        assert not result.passed, f"harness edit survived at line {line_index + 1} col {col}"
        failures += 1
    assert failures == 200

    evasion = splice_into_kernel(
        BASE_KERNEL,
        "    _mod = __import__('torch').nn\n"
        "    _fn = getattr(_mod, ''.join(['fu', 'nctional']))\n"
        "    _relu = getattr(_fn, 're' + 'lu')",
    )
    result = verify_structure(evasion, BASELINE)
    assert not result.passed
    assert "dynamic module access" in result.diagnostic
    announce("harness immutability (200 splices pass, 200 edits fail, evasion rejected)")


def test_kb_golden_files(tmp_path):
    kb_dir = REPO_ROOT / "knowledge"
    goldens_dir = Path(__file__).parent / "goldens"
    kb = load_knowledge(kb_dir)
    rendered = {stage: format_for_llm(kb, stage) for stage in DEFAULT_SEQUENCE}

    # byte-stable across runs
    again = load_knowledge(kb_dir)
    for stage in DEFAULT_SEQUENCE:
        assert format_for_llm(again, stage) == rendered[stage]

    # byte-stable against the frozen goldens
    for stage in DEFAULT_SEQUENCE:
        golden = (goldens_dir / f"kb_{stage}.md").read_text()
        assert rendered[stage] == golden, f"golden drift for stage {stage}"

    # byte-stable under file-order permutation
    rng = random.Random(5)
    names = sorted(p.name for p in kb_dir.iterdir() if p.suffix == ".yaml")
    for trial in range(3):
        permuted = tmp_path / f"perm{trial}"
        permuted.mkdir()
        prefixes = [f"{i:02d}_" for i in range(len(names))]
        rng.shuffle(prefixes)
        for prefix, name in zip(prefixes, names):
            shutil.copy(kb_dir / name, permuted / f"{prefix}{name}")
        shutil.copytree(kb_dir / "examples", permuted / "examples")
        permuted_kb = load_knowledge(permuted)
        for stage in DEFAULT_SEQUENCE:
            assert format_for_llm(permuted_kb, stage) == rendered[stage]
    announce("KB golden files (byte-stable across runs and file-order permutations)")


def test_end_to_end_mock_run(tmp_path, monkeypatch):
    from kernelsmith.bench import read_records

    start = time.monotonic()
    monkeypatch.setenv("AIBENCH_CARD", "BMG")
    kernel_path = tmp_path / "kernel.py"
    kernel_path.write_text(BASE_KERNEL)

    candidate1 = BASE_KERNEL.replace("float64", "float32")
    candidate2 = splice_into_kernel(candidate1, "    # fused epilogue")
    llm = ScriptedBackend([
        json.dumps([
            {"type": "dtype_float64", "severity": 4, "description": "f64 accumulator",
             "suggested_fix": "float32", "speedup_low": 1.5, "speedup_high": 2.0},
            {"type": "unfused_kernels", "severity": 3, "description": "two launches",
             "suggested_fix": "fuse", "speedup_low": 1.2, "speedup_high": 2.0},
            {"type": "suboptimal_warps", "severity": 2, "description": "8 warps",
             "suggested_fix": "32 warps", "speedup_low": 1.1, "speedup_high": 1.5},
        ]),
        "dtype_fix, fusion, gpu_specific",
        llm_code_response(candidate1),
        json.dumps([
            {"type": "unfused_kernels", "severity": 3, "description": "two launches",
             "suggested_fix": "fuse", "speedup_low": 1.2, "speedup_high": 2.0},
            {"type": "suboptimal_warps", "severity": 2, "description": "8 warps",
             "suggested_fix": "32 warps", "speedup_low": 1.1, "speedup_high": 1.5},
        ]),
        llm_code_response(candidate2),
        "[]",
    ])
    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1400.0]))
    runner.add(candidate1, "ci_small", MockScenario(times_us=[1200.0]))
    runner.add(candidate2, "ci_small", MockScenario(times_us=[1000.0]))

    config = PipelineConfig(
        kb_dir=REPO_ROOT / "knowledge",
        output_dir=tmp_path / "out",
        bench_iterations=5,
        bench_warmup=0,
    )
    result = optimize(
        kernel_path, REPO_ROOT / "specs" / "matmul_relu.yaml", "ci_small", config,
        llm=llm, runner=runner, gpu=GPU,
    )

    assert result.candidates[result.selected_candidate_index][1] == pytest.approx(1.4)
    run = result.report["runs"][0]
    assert run["executed_stages"] == ["dtype_fix", "fusion"]
    assert "gpu_specific" not in run["executed_stages"]  # skipped after empty re-analysis

    report = json.loads((config.output_dir / "report.json").read_text())
    for key in ("kernel", "spec", "variant", "speedup", "runs", "candidate_speedups"):
        assert key in report
    rows = read_records(config.output_dir / "results.csv")
    assert rows[0]["AIBENCH_CARD"] == "BMG"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0
    announce(f"end-to-end mock run (speedup 1.4, stages skipped, report+CSV, {elapsed:.1f}s)")
