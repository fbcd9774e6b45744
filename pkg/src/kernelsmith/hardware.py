"""Target-GPU modeling, shape-aware launch parameters, autotune grids.

Detection prefers a live device query, falling back to xpu-smi JSON
output, then a flat config file. Parameter derivation is pure arithmetic:
family base tiles, power-of-two clamping against the problem shape,
register-file budgeting, and swizzle-group sizing.

Profile config file (flat YAML mapping mirroring GpuProfile; all keys
optional, family inferred when absent):

    family: arc_pro          # arc | arc_pro | integrated | unknown
    device_name: ...         # aids family inference
    eu_count: 512
    subslice_count: 32
    slice_count: 1
    max_compute_units: 32
    max_work_group_size: 1024
    subgroup_size: 32
    global_memory_bytes: 34359738368
    slm_bytes: 131072
    fp16: true
    bf16: true
    fp64: false

xpu-smi JSON capture: {"device_list": [{"device_name": ..,
"number_of_eus": .., "number_of_sub_slices": .., "number_of_slices": ..,
"max_compute_units": .., "memory_physical_size_byte": "..",
"local_memory_size_byte": "..", "fp16": .., "bf16": .., "fp64": ..}]};
a sample capture lives at tests/fixtures/xpu_smi_capture.json.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import yaml

logger = logging.getLogger(__name__)

VALID_NUM_WARPS = (1, 2, 4, 8, 16, 32)
MAX_BLOCK_DIM = 256
MIN_BLOCK_K = 16  # halving floor during register budgeting

# Tunable per-family base tiles (bm, bn, bk); unknown devices get the
# conservative integrated defaults.
FAMILY_BASE_TILES: dict[str, tuple[int, int, int]] = {
    "arc_pro": (256, 256, 32),
    "arc": (128, 128, 32),
    "integrated": (64, 64, 32),
    "unknown": (64, 64, 32),
}

GRID_LIMIT = 12


class GpuDetectError(ValueError):
    pass


@dataclass(frozen=True)
class GpuProfile:
    family: str = "unknown"  # arc | arc_pro | integrated | unknown
    eu_count: int = 96
    subslice_count: int = 6
    slice_count: int = 1
    max_compute_units: int = 16
    max_work_group_size: int = 512
    subgroup_size: int = 16
    global_memory_bytes: int = 4 * 1024**3
    slm_bytes: int = 64 * 1024
    fp16: bool = True
    bf16: bool = False
    fp64: bool = False


@dataclass(frozen=True)
class GrfMode:
    """Register-file configuration: large (256 regs/thread, 64 KB tile
    budget) or small (128 regs/thread, 32 KB)."""

    mode: str
    registers_per_thread: int
    capacity_bytes: int

    _LEGAL = {("large", 256, 65536), ("small", 128, 32768)}

    def __post_init__(self):
        if (self.mode, self.registers_per_thread, self.capacity_bytes) not in self._LEGAL:
            raise ValueError(
                f"illegal GRF tuple ({self.mode}, {self.registers_per_thread}, "
                f"{self.capacity_bytes}); only large/256/65536 and small/128/32768 exist"
            )

    @classmethod
    def large(cls) -> "GrfMode":
        return cls("large", 256, 65536)

    @classmethod
    def small(cls) -> "GrfMode":
        return cls("small", 128, 32768)


@dataclass(frozen=True)
class TuningParams:
    block_m: int
    block_n: int
    block_k: int
    group_size_m: int
    num_warps: int
    num_stages: int
    grf_mode: GrfMode

    def __post_init__(self):
        for name, v in (("block_m", self.block_m), ("block_n", self.block_n), ("block_k", self.block_k)):
            if not _is_pow2(v) or v > MAX_BLOCK_DIM:
                raise ValueError(f"{name}={v} must be a power of two <= {MAX_BLOCK_DIM}")
        if self.num_warps not in VALID_NUM_WARPS:
            raise ValueError(f"num_warps={self.num_warps} not in {VALID_NUM_WARPS}")
        if self.group_size_m < 1 or self.num_stages < 1:
            raise ValueError("group_size_m and num_stages must be positive")

    def tile_memory_bytes(self, bytes_per_element: int) -> int:
        return (self.block_m * self.block_k + self.block_k * self.block_n) * bytes_per_element


@dataclass(frozen=True)
class AutotuneConfig:
    configs: tuple[TuningParams, ...]

    def __post_init__(self):
        if len(self.configs) > GRID_LIMIT:
            raise ValueError(f"autotune grid exceeds {GRID_LIMIT} configs")
        if len(set(self.configs)) != len(self.configs):
            raise ValueError("autotune grid contains duplicates")


def _is_pow2(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


def floor_pow2(v: int) -> int:
    """Largest power of two <= v, floored at 1."""
    if v < 1:
        return 1
    return 1 << (v.bit_length() - 1)


# --- detection ---------------------------------------------------------------


def _infer_family(device_name: str | None, max_compute_units: int, memory_bytes: int) -> str:
    if device_name:
        lowered = device_name.lower()
        if "arc" in lowered and "pro" in lowered:
            return "arc_pro"
        if "arc" in lowered:
            return "arc"
        if any(tag in lowered for tag in ("iris", "uhd", "integrated")):
            return "integrated"
    if max_compute_units >= 24 and memory_bytes >= 24 * 1024**3:
        return "arc_pro"
    if max_compute_units >= 16:
        return "arc"
    if max_compute_units > 0:
        return "integrated"
    return "unknown"


def _profile_from_fields(fields: dict, device_name: str | None = None) -> GpuProfile:
    defaults = GpuProfile()
    mcu = int(fields.get("max_compute_units", fields.get("number_of_sub_slices", 0)) or 0)
    memory = int(fields.get("global_memory_bytes", fields.get("memory_physical_size_byte", 0)) or 0)
    family = str(fields.get("family") or _infer_family(device_name, mcu, memory))
    if family not in FAMILY_BASE_TILES:
        family = "unknown"
    return GpuProfile(
        family=family,
        eu_count=int(fields.get("eu_count", fields.get("number_of_eus", defaults.eu_count)) or defaults.eu_count),
        subslice_count=int(fields.get("subslice_count", fields.get("number_of_sub_slices", defaults.subslice_count)) or defaults.subslice_count),
        slice_count=int(fields.get("slice_count", fields.get("number_of_slices", defaults.slice_count)) or defaults.slice_count),
        max_compute_units=mcu or defaults.max_compute_units,
        max_work_group_size=int(fields.get("max_work_group_size", defaults.max_work_group_size) or defaults.max_work_group_size),
        subgroup_size=int(fields.get("subgroup_size", defaults.subgroup_size) or defaults.subgroup_size),
        global_memory_bytes=memory or defaults.global_memory_bytes,
        slm_bytes=int(fields.get("slm_bytes", fields.get("local_memory_size_byte", defaults.slm_bytes)) or defaults.slm_bytes),
        fp16=bool(fields.get("fp16", defaults.fp16)),
        bf16=bool(fields.get("bf16", defaults.bf16)),
        fp64=bool(fields.get("fp64", defaults.fp64)),
    )


def _query_device() -> GpuProfile | None:
    try:
        import torch  # optional dependency of the primary package

        if not (hasattr(torch, "xpu") and torch.xpu.is_available()):
            return None
        props = torch.xpu.get_device_properties(0)
        fields = {
            "eu_count": getattr(props, "gpu_eu_count", 0),
            "subslice_count": getattr(props, "gpu_subslice_count", 0),
            "max_compute_units": getattr(props, "max_compute_units", 0),
            "max_work_group_size": getattr(props, "max_work_group_size", 0),
            "subgroup_size": max(getattr(props, "sub_group_sizes", [16]) or [16]),
            "global_memory_bytes": getattr(props, "total_memory", 0),
            "fp16": getattr(props, "has_fp16", True),
            "bf16": getattr(props, "has_bf16", False),
            "fp64": getattr(props, "has_fp64", False),
        }
        return _profile_from_fields(fields, device_name=getattr(props, "name", None))
    except Exception as exc:  # any failure falls through to the next source
        logger.debug("device query unavailable: %s", exc)
        return None


def detect_gpu(source: str = "device_query", payload: str | None = None) -> GpuProfile:
    """Build a GpuProfile from a device query, xpu-smi JSON, or config file.

    ``device_query`` probes the live device and falls through to the
    smi_json path when a payload is supplied; with neither available the
    profile degrades to ``unknown`` with conservative defaults.
    """
    if source == "device_query":
        profile = _query_device()
        if profile is not None:
            return profile
        if payload is not None:
            return detect_gpu("smi_json", payload)
        logger.warning("device query unavailable; using conservative unknown profile")
        return GpuProfile()
    if source == "smi_json":
        if payload is None or not payload.strip():
            raise GpuDetectError("smi_json source requires a payload")
        try:
            doc = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise GpuDetectError(f"xpu-smi JSON does not parse: {exc}") from exc
        devices = doc.get("device_list") or []
        if not devices:
            return GpuProfile()
        dev = devices[0]
        return _profile_from_fields(dev, device_name=dev.get("device_name"))
    if source == "config_file":
        if payload is None:
            raise GpuDetectError("config_file source requires a payload")
        try:
            doc = yaml.safe_load(payload)
        except yaml.YAMLError as exc:
            raise GpuDetectError(f"profile config does not parse: {exc}") from exc
        if not isinstance(doc, dict):
            raise GpuDetectError("profile config must be a flat mapping")
        return _profile_from_fields(doc, device_name=doc.get("device_name"))
    raise GpuDetectError(f"unknown detection source {source!r}")


# --- shape-aware tuning ------------------------------------------------------

SKINNY_ASPECT = 4.0  # m/n beyond this counts as tall-skinny (or the inverse)


def _fit_register_budget(bm: int, bn: int, bk: int, bytes_per_element: int, capacity: int):
    """Shrink tiles until (bm*bk + bk*bn)*bpe fits the GRF capacity.

    block_k halves first (floor 16); if the floor is hit and the tile still
    does not fit, the larger of block_m/block_n halves (floor 16). The
    minimum tile always fits both capacities.
    """
    while (bm * bk + bk * bn) * bytes_per_element > capacity:
        if bk > MIN_BLOCK_K:
            bk //= 2
        elif max(bm, bn) > 16:
            if bm >= bn:
                bm //= 2
            else:
                bn //= 2
        else:  # pragma: no cover - unreachable for legal inputs
            break
    return bm, bn, bk


def _finalize(
    profile: GpuProfile,
    grf: GrfMode,
    bm: int,
    bn: int,
    bk: int,
    m: int,
    n: int,
    k: int,
    bytes_per_element: int,
) -> TuningParams:
    bm = max(1, min(bm, floor_pow2(m), MAX_BLOCK_DIM))
    bn = max(1, min(bn, floor_pow2(n), MAX_BLOCK_DIM))
    bk = max(1, min(bk, floor_pow2(k), MAX_BLOCK_DIM))
    bm, bn, bk = _fit_register_budget(bm, bn, bk, bytes_per_element, grf.capacity_bytes)

    m_tiles = math.ceil(m / bm)
    n_tiles = math.ceil(n / bn)
    total_tiles = m_tiles * n_tiles
    if total_tiles < 16:
        group_size_m = 1  # too few tiles for swizzling to pay off
    else:
        compute_units = max(1, profile.max_compute_units)
        target = math.ceil(total_tiles / (4 * compute_units))
        group_size_m = max(1, min(floor_pow2(max(1, target)), m_tiles))

    area = bm * bn
    if area >= 128 * 128:
        num_warps = 32
    elif area >= 64 * 64:
        num_warps = 16
    else:
        num_warps = 8
    num_stages = 2 if k <= 256 else 3

    return TuningParams(
        block_m=bm,
        block_n=bn,
        block_k=bk,
        group_size_m=group_size_m,
        num_warps=num_warps,
        num_stages=num_stages,
        grf_mode=grf,
    )


def get_optimal_params(
    profile: GpuProfile,
    grf: GrfMode,
    m: int,
    n: int,
    k: int,
    bytes_per_element: int,
) -> TuningParams:
    """Derive launch parameters for one problem shape.

    Starts from the family base tiles, clamps each block dimension to the
    largest power of two not exceeding the problem dimension, widens tiles
    asymmetrically for skinny shapes, then shrinks block_k until the tile
    fits the register-file budget.
    """
    if min(m, n, k) < 1:
        raise ValueError("problem dimensions must be >= 1")
    if bytes_per_element not in (1, 2, 4, 8):
        raise ValueError(f"bytes_per_element={bytes_per_element} not in (1, 2, 4, 8)")

    bm, bn, bk = FAMILY_BASE_TILES.get(profile.family, FAMILY_BASE_TILES["unknown"])
    bm = min(bm, floor_pow2(m))
    bn = min(bn, floor_pow2(n))
    bk = min(bk, floor_pow2(k))

    aspect = m / n
    if aspect >= SKINNY_ASPECT:  # tall-skinny: widen M at N's expense
        if bm * 2 <= min(floor_pow2(m), MAX_BLOCK_DIM):
            bm *= 2
        if bn > 16:
            bn //= 2
    elif aspect <= 1 / SKINNY_ASPECT:  # short-wide: the reverse
        if bn * 2 <= min(floor_pow2(n), MAX_BLOCK_DIM):
            bn *= 2
        if bm > 16:
            bm //= 2

    return _finalize(profile, grf, bm, bn, bk, m, n, k, bytes_per_element)


def generate_autotune_grid(
    profile: GpuProfile,
    m: int,
    n: int,
    k: int,
    bytes_per_element: int,
) -> AutotuneConfig:
    """Curated grid of at most 12 valid configs, best-estimate first.

    The head is the shape-optimal large-GRF config; the small-GRF optimum
    comes second so both register modes are always represented. Remaining
    entries are halved/doubled block-dimension neighbors, re-validated
    through the same budgeting rules and deduplicated.
    """
    head = get_optimal_params(profile, GrfMode.large(), m, n, k, bytes_per_element)
    small = get_optimal_params(profile, GrfMode.small(), m, n, k, bytes_per_element)

    seeds: list[TuningParams] = [head, small]
    factors = [
        (0.5, 1, 1), (1, 0.5, 1), (1, 1, 0.5),
        (2, 1, 1), (1, 2, 1), (1, 1, 2),
        (0.5, 0.5, 1), (2, 2, 1),
    ]
    for grf, base in ((GrfMode.large(), head), (GrfMode.small(), small)):
        for fm, fn, fk in factors:
            bm = max(1, int(base.block_m * fm))
            bn = max(1, int(base.block_n * fn))
            bk = max(1, int(base.block_k * fk))
            seeds.append(_finalize(profile, grf, bm, bn, bk, m, n, k, bytes_per_element))

    configs: list[TuningParams] = []
    for params in seeds:
        if params not in configs:
            configs.append(params)
        if len(configs) == GRID_LIMIT:
            break
    return AutotuneConfig(configs=tuple(configs))


def render_autotune_decorator(grid: AutotuneConfig, key_dims: tuple[str, ...] = ("M", "N", "K")) -> str:
    """Render the grid as Triton autotune decorator source (for prompts)."""
    lines = ["@triton.autotune(", "    configs=["]
    for p in grid.configs:
        lines.append(
            "        triton.Config({"
            f"'BLOCK_M': {p.block_m}, 'BLOCK_N': {p.block_n}, 'BLOCK_K': {p.block_k}, "
            f"'GROUP_SIZE_M': {p.group_size_m}, 'grf_mode': '{p.grf_mode.registers_per_thread}'"
            f"}}, num_warps={p.num_warps}, num_stages={p.num_stages}),"
        )
    lines += ["    ],", f"    key={list(key_dims)!r},", ")"]
    return "\n".join(lines)


def describe_profile(profile: GpuProfile) -> str:
    return (
        f"family={profile.family}, EUs={profile.eu_count}, "
        f"subslices={profile.subslice_count}, slices={profile.slice_count}, "
        f"compute units={profile.max_compute_units}, "
        f"max workgroup={profile.max_work_group_size}, subgroup={profile.subgroup_size}, "
        f"memory={profile.global_memory_bytes // 1024**2} MiB, "
        f"SLM={profile.slm_bytes // 1024} KiB, "
        f"fp16={profile.fp16}, bf16={profile.bf16}, fp64={profile.fp64}"
    )
