"""Device-aware timing.

GPU path: warmup with an L2-flush buffer zeroed between iterations,
pre-allocated event pairs, a dummy 1024x1024 matmul per measured iteration
to keep the command stream full, one synchronize after the loop. CPU path:
one profiler session with a record-function marker per iteration. Both
return raw per-iteration microseconds; trim-and-mean is the caller's job.
"""

from __future__ import annotations

import time

import torch

from .errors import DeviceError

FLUSH_BUFFER_BYTES = 256 * 1024 * 1024
DUMMY_MATMUL_DIM = 1024

GPU_DEFAULT_WARMUP = 200
CPU_DEFAULT_WARMUP = 5


def device_module(device: torch.device):
    if device.type == "cuda":
        return torch.cuda
    if device.type == "xpu":
        return getattr(torch, "xpu", None)
    return None


def is_gpu(device: torch.device) -> bool:
    return device.type in ("cuda", "xpu")


def check_device(name: str) -> torch.device:
    device = torch.device(name)
    mod = device_module(device)
    if mod is not None and not (hasattr(mod, "is_available") and mod.is_available()):
        raise DeviceError(f"device {name!r} is not available")
    return device


class FlushBuffer:
    """256 MB buffer allocated once per session; zeroing it flushes L2."""

    def __init__(self, device: torch.device):
        self._buffer: torch.Tensor | None = None
        self._device = device

    def flush(self) -> None:
        if not is_gpu(self._device):
            return
        if self._buffer is None:
            self._buffer = torch.empty(
                FLUSH_BUFFER_BYTES, dtype=torch.uint8, device=self._device
            )
        self._buffer.zero_()


def _time_gpu(fn, device: torch.device, iterations: int, warmup: int,
              flush: FlushBuffer, dtype: torch.dtype) -> list[float]:
    mod = device_module(device)
    for _ in range(warmup):
        flush.flush()
        fn()
    mod.synchronize()

    # dummy operands live on device; re-issued each iteration to fill the
    # command stream before the short-lived kernel
    dummy_a = torch.randn(DUMMY_MATMUL_DIM, DUMMY_MATMUL_DIM, device=device, dtype=dtype)
    dummy_b = torch.randn(DUMMY_MATMUL_DIM, DUMMY_MATMUL_DIM, device=device, dtype=dtype)
    events = [
        (mod.Event(enable_timing=True), mod.Event(enable_timing=True))
        for _ in range(iterations)
    ]
    for start, end in events:
        flush.flush()
        torch.matmul(dummy_a, dummy_b)
        start.record()
        fn()
        end.record()
    mod.synchronize()
    return [start.elapsed_time(end) * 1000.0 for start, end in events]  # ms -> us


def _time_cpu(fn, iterations: int, warmup: int) -> list[float]:
    for _ in range(warmup):
        fn()
    try:
        from torch.profiler import ProfilerActivity, profile, record_function

        with profile(activities=[ProfilerActivity.CPU]) as prof:
            for i in range(iterations):
                with record_function(f"timed_iter_{i}"):
                    fn()
        by_marker = {}
        for event in prof.key_averages():
            if event.key.startswith("timed_iter_"):
                by_marker[int(event.key.rsplit("_", 1)[1])] = float(event.cpu_time_total)
        if len(by_marker) == iterations:
            return [by_marker[i] for i in range(iterations)]
    except Exception:  # profiler unavailable or misbehaving; fall through
        pass
    times = []
    for _ in range(iterations):
        start = time.perf_counter_ns()
        fn()
        times.append((time.perf_counter_ns() - start) / 1000.0)
    return times


def timed_run(
    model,
    inputs: list[torch.Tensor],
    iterations: int,
    warmup: int | None,
    device: torch.device,
    flush: FlushBuffer,
    dtype: torch.dtype = torch.float32,
) -> list[float]:
    """Time ``model(*inputs)`` for ``iterations``; returns raw microseconds."""
    if iterations < 1:
        raise DeviceError("iterations must be >= 1")

    def fn():
        with torch.no_grad():
            model(*inputs)

    if is_gpu(device):
        warmup = GPU_DEFAULT_WARMUP if warmup is None else warmup
        return _time_gpu(fn, device, iterations, warmup, flush, dtype)
    warmup = CPU_DEFAULT_WARMUP if warmup is None else warmup
    return _time_cpu(fn, iterations, warmup)
