"""Protocol session: module loading, request dispatch, estimation hooks."""

from __future__ import annotations

import hashlib
import importlib.util
import json
import logging
import sys
import tempfile
from pathlib import Path

import torch

from . import PROTOCOL_VERSION
from .comparison import compare_outputs, copy_weights, set_all_seeds
from .errors import HarnessError, ModuleLoadError, ProtocolError
from .inputs import generate_inputs
from .specio import TORCH_DTYPES, HarnessSpec, parse_spec
from .timing import CPU_DEFAULT_WARMUP, GPU_DEFAULT_WARMUP, FlushBuffer, check_device, is_gpu, timed_run

logger = logging.getLogger(__name__)


def _estimate_flops(model, inputs) -> float | None:
    try:
        from torch.utils.flop_counter import FlopCounterMode

        counter = FlopCounterMode(display=False)
        with counter, torch.no_grad():
            model(*[x.clone() for x in inputs])
        return float(counter.get_total_flops())
    except Exception:
        return None


def _estimate_bytes(model, inputs) -> float:
    """Forward-hook byte counter: input reads, parameter and buffer reads,
    output writes, summed over leaf modules (whole-model fallback when the
    model has no submodules)."""
    total = 0

    def tensor_bytes(obj) -> int:
        if isinstance(obj, torch.Tensor):
            return obj.numel() * obj.element_size()
        if isinstance(obj, (tuple, list)):
            return sum(tensor_bytes(o) for o in obj)
        return 0

    def hook(module, args, output):
        nonlocal total
        total += tensor_bytes(args) + tensor_bytes(output)
        for p in module.parameters(recurse=False):
            total += p.numel() * p.element_size()
        for b in module.buffers(recurse=False):
            total += b.numel() * b.element_size()

    leaves = [m for m in model.modules() if not list(m.children())]
    handles = [m.register_forward_hook(hook) for m in leaves]
    try:
        with torch.no_grad():
            model(*[x.clone() for x in inputs])
    finally:
        for handle in handles:
            handle.remove()
    return float(total)


class HarnessSession:
    """One device, one request in flight; modules cached by content hash."""

    def __init__(self, device: str = "cpu", seed: int = 1234):
        self.device = check_device(device)
        self.seed = seed
        self.flush = FlushBuffer(self.device)
        self.loaded_modules: dict[str, object] = {}
        self._tmpdir = tempfile.TemporaryDirectory(prefix="xpu_harness_")
        set_all_seeds(seed)

    # --- module handling -----------------------------------------------

    def load_module(self, source: str):
        digest = hashlib.sha256(source.encode("utf-8")).hexdigest()
        if digest in self.loaded_modules:
            return self.loaded_modules[digest]
        path = Path(self._tmpdir.name) / f"kernel_{digest[:16]}.py"
        path.write_text(source)
        spec = importlib.util.spec_from_file_location(f"kernel_{digest[:16]}", path)
        module = importlib.util.module_from_spec(spec)
        try:
            spec.loader.exec_module(module)
        except Exception as exc:
            raise ModuleLoadError(f"kernel module failed to import: {exc}") from exc
        if not hasattr(module, "Model"):
            raise ModuleLoadError("kernel module defines no Model class")
        self.loaded_modules[digest] = module
        return module

    def instantiate(self, module, spec: HarnessSpec, dtype_name: str) -> torch.nn.Module:
        set_all_seeds(self.seed)
        try:
            if spec.inits:
                model = module.Model(**spec.inits)
            elif hasattr(module, "get_init_inputs"):
                model = module.Model(*module.get_init_inputs())
            else:
                model = module.Model()
        except Exception as exc:
            raise ModuleLoadError(f"Model construction failed: {exc}") from exc
        dtype = TORCH_DTYPES.get(dtype_name, torch.float32)
        model = model.to(self.device)
        if dtype.is_floating_point:
            model = model.to(dtype)
        return model.eval()

    # --- request handlers -------------------------------------------------

    def _prepare(self, payload: dict, source_key: str = "module_source"):
        spec = parse_spec(payload["spec_yaml"])
        variant = spec.variant(str(payload["variant"]))
        seed = int(payload.get("seed", self.seed))
        module = self.load_module(payload[source_key])
        model = self.instantiate(module, spec, variant.dtype)
        inputs = list(
            generate_inputs(spec, variant.name, seed, device=str(self.device)).values()
        )
        return spec, variant, seed, model, inputs

    def handle_run_ci(self, payload: dict) -> dict:
        _, _, _, model, inputs = self._prepare(payload)
        with torch.no_grad():
            model(*[x.clone() for x in inputs])
        return {"ran": True}

    def handle_bench(self, payload: dict) -> dict:
        spec, variant, _, model, inputs = self._prepare(payload)
        iterations = int(payload.get("iterations", 100))
        default_warmup = GPU_DEFAULT_WARMUP if is_gpu(self.device) else CPU_DEFAULT_WARMUP
        warmup = int(payload.get("warmup", default_warmup))
        dtype = TORCH_DTYPES.get(variant.dtype, torch.float32)
        times = timed_run(model, inputs, iterations, warmup, self.device, self.flush, dtype)

        flops = payload.get("flops")
        byte_count = payload.get("bytes")
        estimated = False
        if flops is None:
            flops = _estimate_flops(model, inputs)
            estimated = flops is not None
            flops = flops or 0.0
        if byte_count is None:
            byte_count = _estimate_bytes(model, inputs)
            estimated = True
        return {
            "times_us": times,
            "flops": float(flops),
            "bytes": float(byte_count),
            "estimated": estimated,
        }

    def handle_compare(self, payload: dict) -> dict:
        spec = parse_spec(payload["spec_yaml"])
        variant = spec.variant(str(payload["variant"]))
        seed = int(payload.get("seed", self.seed))
        rtol = float(payload.get("rtol", 1e-2))
        atol = float(payload.get("atol", 1e-5))
        iterations = int(payload.get("iterations", 10))
        warmup = int(payload.get("warmup", 2))

        original = self.instantiate(self.load_module(payload["original_source"]), spec, variant.dtype)
        candidate = self.instantiate(self.load_module(payload["candidate_source"]), spec, variant.dtype)
        copy_weights(original, candidate)
        inputs = list(
            generate_inputs(spec, variant.name, seed, device=str(self.device)).values()
        )

        summary = compare_outputs(original, candidate, inputs, rtol, atol, seed=seed)
        dtype = TORCH_DTYPES.get(variant.dtype, torch.float32)
        original_times = timed_run(original, inputs, iterations, warmup, self.device, self.flush, dtype)
        optimized_times = timed_run(candidate, inputs, iterations, warmup, self.device, self.flush, dtype)
        result = summary.to_dict()
        result["original_times_us"] = original_times
        result["optimized_times_us"] = optimized_times
        return result

    # --- serve loop ---------------------------------------------------------

    HANDLERS = {
        "run_ci": handle_run_ci,
        "bench": handle_bench,
        "compare": handle_compare,
    }

    def handle_line(self, line: str) -> dict:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return self._error_reply(None, ProtocolError(f"unparseable request line: {exc}"))
        request_id = request.get("id")
        try:
            if request.get("protocol_version") != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"unsupported protocol_version {request.get('protocol_version')!r}; "
                    f"this harness speaks {PROTOCOL_VERSION}"
                )
            kind = request.get("kind")
            handler = self.HANDLERS.get(kind)
            if handler is None:
                raise ProtocolError(f"unknown request kind {kind!r}")
            result = handler(self, request)
            return {"id": request_id, "ok": True, "result": result}
        except KeyError as exc:
            return self._error_reply(request_id, ProtocolError(f"missing request field {exc}"))
        except HarnessError as exc:
            return self._error_reply(request_id, exc)
        except Exception as exc:  # defensive: a kernel can raise anything
            return self._error_reply(request_id, HarnessError(f"{type(exc).__name__}: {exc}"))

    @staticmethod
    def _error_reply(request_id, exc: Exception) -> dict:
        return {
            "id": request_id,
            "ok": False,
            "error": {"class": type(exc).__name__, "message": str(exc)},
        }

    def serve(self, stdin=None, stdout=None) -> int:
        stdin = stdin or sys.stdin
        stdout = stdout or sys.stdout
        for line in stdin:
            if not line.strip():
                continue
            reply = self.handle_line(line)
            stdout.write(json.dumps(reply) + "\n")
            stdout.flush()
            if not reply["ok"] and reply["error"]["class"] == "DeviceError":
                return 1  # device loss is fatal; the reply already went out
        return 0
