import json

import pytest

from kernelsmith.bench import read_records
from kernelsmith.llm import ScriptedBackend
from kernelsmith.pipeline import (
    PipelineConfig,
    PipelineError,
    _refilter_remaining,
    optimize,
)
from kernelsmith.runners import MockRunner, MockScenario

from .conftest import BASE_KERNEL, llm_code_response, splice_into_kernel


def issue(type_name, severity=4):
    return {
        "type": type_name,
        "severity": severity,
        "description": f"{type_name} detected",
        "suggested_fix": "apply the stage pattern",
        "speedup_low": 1.1,
        "speedup_high": 2.0,
    }


def issues_json(*type_names):
    return json.dumps([issue(t) for t in type_names])


@pytest.fixture
def kernel_file(tmp_path):
    path = tmp_path / "input_kernel.py"
    path.write_text(BASE_KERNEL)
    return path


def make_config(tmp_path, kb_dir, **overrides):
    fields = dict(
        kb_dir=kb_dir,
        output_dir=tmp_path / "out",
        bench_iterations=5,
        bench_warmup=0,
    )
    fields.update(overrides)
    return PipelineConfig(**fields)


def test_optimize_dtype_then_fusion_skips_rest(
    kernel_file, spec_path, kb_dir, tmp_path, gpu_profile, monkeypatch
):
    monkeypatch.setenv("AIBENCH_CARD", "BMG")
    candidate1 = BASE_KERNEL.replace("float64", "float32")
    candidate2 = splice_into_kernel(candidate1, "    # fused epilogue")

    llm = ScriptedBackend([
        issues_json("dtype_float64", "unfused_kernels", "suboptimal_warps"),
        "dtype_fix, fusion, gpu_specific",
        llm_code_response(candidate1),
        issues_json("unfused_kernels", "suboptimal_warps"),
        llm_code_response(candidate2),
        "[]",
    ])
    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1400.0]))
    runner.add(candidate1, "ci_small", MockScenario(times_us=[1200.0]))
    runner.add(candidate2, "ci_small", MockScenario(times_us=[1000.0]))

    config = make_config(tmp_path, kb_dir)
    result = optimize(
        kernel_file, spec_path, "ci_small", config,
        llm=llm, runner=runner, gpu=gpu_profile,
    )

    assert result.final_code == candidate2
    assert result.candidates[0][1] == pytest.approx(1.4)
    assert [stage for stage, _ in result.per_stage] == ["dtype_fix", "fusion"]
    assert all(outcome.succeeded for _, outcome in result.per_stage)
    run = result.report["runs"][0]
    assert run["plan"] == ["dtype_fix", "fusion", "gpu_specific"]
    assert run["plan_provenance"] == "llm"
    assert run["executed_stages"] == ["dtype_fix", "fusion"]  # gpu_specific skipped
    assert run["analyzer_calls"] == 3

    report_path = config.output_dir / "report.json"
    assert json.loads(report_path.read_text())["speedup"] == pytest.approx(1.4)
    rows = read_records(config.output_dir / "results.csv")
    assert rows[0]["AIBENCH_CARD"] == "BMG"
    assert rows[0]["kernel_name"] == "matmul_relu"
    assert (config.output_dir / "optimized_matmul_relu.py").read_text() == candidate2


def test_best_of_k_selects_highest_speedup(
    kernel_file, spec_path, kb_dir, tmp_path, gpu_profile
):
    speedups = [1.1, 1.4, 1.2]
    candidates = [splice_into_kernel(BASE_KERNEL, f"    # candidate-{i}") for i in range(3)]
    script = []
    for candidate in candidates:
        script += [issues_json("dtype_float64"), "dtype_fix", llm_code_response(candidate)]
    llm = ScriptedBackend(script)

    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1400.0]))
    for candidate, s in zip(candidates, speedups):
        runner.add(candidate, "ci_small", MockScenario(times_us=[1400.0 / s]))

    config = make_config(tmp_path, kb_dir, best_k=3)
    result = optimize(
        kernel_file, spec_path, "ci_small", config,
        llm=llm, runner=runner, gpu=gpu_profile,
    )
    assert result.selected_candidate_index == 1
    assert result.final_code == candidates[1]
    assert [round(s, 6) for _, s in result.candidates] == [
        pytest.approx(s) for s in speedups
    ]


def test_all_failing_script_returns_input_byte_identical(
    kernel_file, spec_path, kb_dir, tmp_path, gpu_profile
):
    bad = [splice_into_kernel(BASE_KERNEL, f"    # bad-{i}") for i in range(3)]
    llm = ScriptedBackend([
        issues_json("dtype_float64"),
        "dtype_fix",
        llm_code_response(bad[0]),
        llm_code_response(bad[1]),
        llm_code_response(bad[2]),  # fallback extraction, also bad
    ])
    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1000.0]))
    for candidate in bad:
        runner.add(candidate, "ci_small", MockScenario(times_us=[900.0], correct=False))

    config = make_config(tmp_path, kb_dir, max_iterations_per_stage=2)
    result = optimize(
        kernel_file, spec_path, "ci_small", config,
        llm=llm, runner=runner, gpu=gpu_profile,
    )
    assert result.final_code == BASE_KERNEL
    assert result.candidates[0][1] == pytest.approx(1.0)
    assert not result.per_stage[0][1].succeeded
    assert kernel_file.read_text() == BASE_KERNEL  # input untouched on disk
    dumps = list((config.output_dir / "failed").glob("dtype_fix_*.kernel"))
    assert len(dumps) == 1


def test_empty_analysis_produces_empty_plan(
    kernel_file, spec_path, kb_dir, tmp_path, gpu_profile
):
    llm = ScriptedBackend([issues_json()])
    runner = MockRunner(default=MockScenario(times_us=[1000.0]))
    config = make_config(tmp_path, kb_dir)
    result = optimize(
        kernel_file, spec_path, "ci_small", config,
        llm=llm, runner=runner, gpu=gpu_profile,
    )
    assert result.final_code == BASE_KERNEL
    assert result.per_stage == []
    assert result.report["runs"][0]["plan"] == []


def test_optimize_requires_backend_and_runner(kernel_file, spec_path, kb_dir, tmp_path):
    config = make_config(tmp_path, kb_dir)
    with pytest.raises(PipelineError):
        optimize(kernel_file, spec_path, "ci_small", config, llm=None, runner=MockRunner())
    with pytest.raises(PipelineError):
        optimize(kernel_file, spec_path, "ci_small", config, llm=ScriptedBackend([]), runner=None)


def test_unparseable_input_kernel_aborts(tmp_path, spec_path, kb_dir, gpu_profile):
    bad_path = tmp_path / "broken.py"
    bad_path.write_text("def f(:")
    config = make_config(tmp_path, kb_dir)
    with pytest.raises(PipelineError):
        optimize(
            bad_path, spec_path, "ci_small", config,
            llm=ScriptedBackend([]), runner=MockRunner(), gpu=gpu_profile,
        )


def test_config_from_env_and_overrides():
    env = {
        "MAX_ATTEMPTS_PER_STAGE": "7",
        "BEST_K": "3",
        "CORRECTNESS_RTOL": "0.05",
        "CORRECTNESS_ATOL": "1e-6",
        "REQUIRE_CORRECTNESS": "false",
        "XPU_DEVICE": "xpu",
    }
    config = PipelineConfig.from_env(env)
    assert config.max_iterations_per_stage == 7
    assert config.best_k == 3
    assert config.rtol == 0.05
    assert config.atol == 1e-6
    assert config.require_correctness is False
    assert config.device_name == "xpu"
    # flags override env
    config = PipelineConfig.from_env(env, best_k=1)
    assert config.best_k == 1


def test_agent_max_iterations_alias():
    assert PipelineConfig.from_env({"AGENT_MAX_ITERATIONS": "3"}).max_iterations_per_stage == 3
    both = {"AGENT_MAX_ITERATIONS": "3", "MAX_ATTEMPTS_PER_STAGE": "5"}
    assert PipelineConfig.from_env(both).max_iterations_per_stage == 5


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(best_k=0)
    with pytest.raises(ValueError):
        PipelineConfig(rtol=0)


def test_refilter_drops_resolved_and_inserts_new():
    remaining = ["fusion", "gpu_specific"]
    executed = ["dtype_fix"]
    new_active = {"gpu_specific", "memory_access"}
    merged = _refilter_remaining(remaining, executed, new_active)
    assert merged == ["memory_access", "gpu_specific"]


def test_refilter_never_repeats_executed_stage():
    merged = _refilter_remaining(["fusion"], ["dtype_fix"], {"dtype_fix", "fusion"})
    assert merged == ["fusion"]


def test_refilter_empty_active_empties_plan():
    assert _refilter_remaining(["gpu_specific", "autotune"], ["dtype_fix"], set()) == []
