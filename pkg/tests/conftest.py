"""Shared fixtures: a baseline kernel module, spec files, and helpers for
scripting backends and runners."""

from __future__ import annotations

from pathlib import Path

import pytest

from kernelsmith.kernelmod import KernelModule
from kernelsmith.runners import MockRunner, MockScenario

REPO_ROOT = Path(__file__).resolve().parent.parent

# A functionally plausible baseline: matmul with a float64 accumulator plus
# a separate relu kernel (one dtype issue, one fusion opportunity).
BASE_KERNEL = '''\
import torch
import triton
import triton.language as tl


@triton.jit
def matmul_kernel(a_ptr, b_ptr, c_ptr, M, N, K,
                  stride_am, stride_ak, stride_bk, stride_bn,
                  stride_cm, stride_cn,
                  BLOCK_M: tl.constexpr, BLOCK_N: tl.constexpr, BLOCK_K: tl.constexpr):
    pid_m = tl.program_id(0)
    pid_n = tl.program_id(1)
    offs_m = pid_m * BLOCK_M + tl.arange(0, BLOCK_M)
    offs_n = pid_n * BLOCK_N + tl.arange(0, BLOCK_N)
    acc = tl.zeros((BLOCK_M, BLOCK_N), dtype=tl.float64)
    for k in range(0, K, BLOCK_K):
        offs_k = k + tl.arange(0, BLOCK_K)
        a = tl.load(a_ptr + offs_m[:, None] * stride_am + offs_k[None, :] * stride_ak,
                    mask=(offs_m[:, None] < M) & (offs_k[None, :] < K), other=0.0)
        b = tl.load(b_ptr + offs_k[:, None] * stride_bk + offs_n[None, :] * stride_bn,
                    mask=(offs_k[:, None] < K) & (offs_n[None, :] < N), other=0.0)
        acc += tl.dot(a, b)
    c_ptrs = c_ptr + offs_m[:, None] * stride_cm + offs_n[None, :] * stride_cn
    tl.store(c_ptrs, acc, mask=(offs_m[:, None] < M) & (offs_n[None, :] < N))


@triton.jit
def relu_kernel(x_ptr, out_ptr, n, BLOCK: tl.constexpr):
    pid = tl.program_id(0)
    offs = pid * BLOCK + tl.arange(0, BLOCK)
    mask = offs < n
    x = tl.load(x_ptr + offs, mask=mask)
    tl.store(out_ptr + offs, tl.maximum(x, 0.0), mask=mask)


class Model(torch.nn.Module):
    def forward(self, a, b):
        M, K = a.shape
        K, N = b.shape
        c = torch.empty((M, N), device=a.device, dtype=a.dtype)
        grid = (triton.cdiv(M, 64), triton.cdiv(N, 64))
        matmul_kernel[grid](a, b, c, M, N, K,
                            a.stride(0), a.stride(1), b.stride(0), b.stride(1),
                            c.stride(0), c.stride(1),
                            BLOCK_M=64, BLOCK_N=64, BLOCK_K=32)
        out = torch.empty_like(c)
        relu_kernel[(triton.cdiv(c.numel(), 256),)](c, out, c.numel(), BLOCK=256)
        return out


def get_inputs():
    return [torch.randn(64, 64), torch.randn(64, 64)]


def get_init_inputs():
    return []
'''


def splice_into_kernel(source: str, text: str, kernel_index: int = 0) -> str:
    """Insert ``text`` (indented statements/comments) at the end of a
    jit-kernel body -- a kernel-region-only edit."""
    module = KernelModule.from_source(source)
    span = module.kernel_regions[kernel_index]
    lines = source.split("\n")
    lines.insert(span.end_line, text)
    return "\n".join(lines)


def llm_code_response(code: str, thought: str = "applying the stage transformation") -> str:
    return f"{thought}\n```python\n{code}\n```"


@pytest.fixture
def base_kernel() -> str:
    return BASE_KERNEL


@pytest.fixture
def base_module() -> KernelModule:
    return KernelModule.from_source(BASE_KERNEL)


@pytest.fixture
def spec_path() -> Path:
    return REPO_ROOT / "specs" / "matmul_relu.yaml"


@pytest.fixture
def matmul_spec(spec_path):
    from kernelsmith.bench import load_spec

    return load_spec(spec_path)


@pytest.fixture
def kb_dir() -> Path:
    return REPO_ROOT / "knowledge"


@pytest.fixture
def sample_kb(kb_dir):
    from kernelsmith.knowledge import load_knowledge

    return load_knowledge(kb_dir)


@pytest.fixture
def gpu_profile():
    from kernelsmith.hardware import GpuProfile

    return GpuProfile(family="arc_pro", max_compute_units=32,
                      global_memory_bytes=32 * 1024**3)


def make_runner(*scenarios: tuple[str, MockScenario], variant: str = "ci_small") -> MockRunner:
    runner = MockRunner()
    for source, scenario in scenarios:
        runner.add(source, variant, scenario)
    return runner


@pytest.fixture
def scenario_runner():
    return make_runner
