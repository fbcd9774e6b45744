#!/usr/bin/env python3
"""End-to-end pipeline demo against scripted LLM responses and a mock runner.

No network, no GPU: the scripted backend plays an analyzer that finds a
float64 accumulator and an unfused epilogue, then a refinement agent that
fixes both; the mock runner supplies deterministic timings. Useful as a
worked example of wiring the pieces together and as a smoke check that the
installed package is healthy.

    python scripts/run_mock_pipeline.py [--output-dir DIR]
"""

import argparse
import json
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "tests"))

from kernelsmith.hardware import GpuProfile
from kernelsmith.llm import ScriptedBackend
from kernelsmith.pipeline import PipelineConfig, optimize
from kernelsmith.runners import MockRunner, MockScenario

from conftest import BASE_KERNEL, llm_code_response, splice_into_kernel


def issue(type_name, severity, description, fix, low, high):
    return {
        "type": type_name, "severity": severity, "description": description,
        "suggested_fix": fix, "speedup_low": low, "speedup_high": high,
    }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="kernelsmith_out")
    args = parser.parse_args()

    kernel_path = Path(args.output_dir) / "demo_input.py"
    kernel_path.parent.mkdir(parents=True, exist_ok=True)
    kernel_path.write_text(BASE_KERNEL)

    dtype_fixed = BASE_KERNEL.replace("float64", "float32")
    fused = splice_into_kernel(dtype_fixed, "    # epilogue folded into the matmul store")

    llm = ScriptedBackend([
        json.dumps([
            issue("dtype_float64", 4, "float64 accumulator wastes datapath",
                  "accumulate in float32", 1.8, 2.2),
            issue("unfused_kernels", 3, "relu launched as a second kernel",
                  "fold the epilogue into the matmul store", 1.3, 2.0),
        ]),
        "dtype_fix, fusion",
        llm_code_response(dtype_fixed, thought="drop the float64 accumulator"),
        json.dumps([
            issue("unfused_kernels", 3, "relu launched as a second kernel",
                  "fold the epilogue into the matmul store", 1.3, 2.0),
        ]),
        llm_code_response(fused, thought="fold relu into the store"),
    ])

    runner = MockRunner()
    runner.add(BASE_KERNEL, "ci_small", MockScenario(times_us=[1400.0, 1410.0, 1390.0]))
    runner.add(dtype_fixed, "ci_small", MockScenario(times_us=[1150.0, 1160.0, 1140.0]))
    runner.add(fused, "ci_small", MockScenario(times_us=[980.0, 990.0, 970.0]))

    config = PipelineConfig(
        kb_dir=REPO_ROOT / "knowledge",
        output_dir=Path(args.output_dir),
        bench_iterations=9,
        bench_warmup=0,
    )
    result = optimize(
        kernel_path,
        REPO_ROOT / "specs" / "matmul_relu.yaml",
        "ci_small",
        config,
        llm=llm,
        runner=runner,
        gpu=GpuProfile(family="arc_pro", max_compute_units=32),
    )

    print(f"executed stages : {[s for s, _ in result.per_stage]}")
    print(f"final speedup   : {result.candidates[result.selected_candidate_index][1]:.3f}x")
    print(f"report          : {config.output_dir / 'report.json'}")
    print(f"optimized module: {config.output_dir / 'optimized_matmul_relu.py'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
