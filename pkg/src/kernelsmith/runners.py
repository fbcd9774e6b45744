"""Runner interface: the one trusted path for executing and timing kernels.

Two implementations: a deterministic fingerprint-keyed mock for tests, and
a subprocess client that drives the real execution harness over the
line-delimited JSON wire protocol (version 1, documented in PROTOCOL.md).
Both carry a serialization token (``lock``) because device access is
exclusive: at most one bench/compare may be in flight.
"""

from __future__ import annotations

import itertools
import json
import logging
import subprocess
import sys
import threading
from dataclasses import dataclass, field

from .bench import ProblemSpec
from .kernelmod import fingerprint

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1


class RunnerTransportError(RuntimeError):
    """The runner channel itself failed (process death, malformed reply)."""


class ScriptedMissError(KeyError):
    """The mock runner has no scenario for the requested module."""


@dataclass
class CompareReply:
    correct: bool
    original_times_us: list[float]
    optimized_times_us: list[float]
    nan: bool = False
    inf_new: bool = False
    shape_mismatch: bool = False
    max_abs_diff: float = 0.0
    mean_diff: float = 0.0
    max_rel_diff: float = 0.0
    exceed_count: int = 0
    exceed_pct: float = 0.0

    def summary(self) -> str:
        if self.shape_mismatch:
            return "output shape mismatch between candidate and reference"
        if self.nan:
            return "candidate output contains NaN"
        if self.inf_new:
            return "candidate output contains Inf where the original has none"
        if self.correct:
            return "outputs match within tolerance"
        return (
            f"max_abs_diff={self.max_abs_diff:g}, mean_diff={self.mean_diff:g}, "
            f"max_rel_diff={self.max_rel_diff:g}, "
            f"{self.exceed_count} elements ({self.exceed_pct:.2f}%) exceed tolerance"
        )


@dataclass
class MockScenario:
    """Scripted outcome for one (module, variant) pair."""

    times_us: list[float] = field(default_factory=lambda: [1000.0])
    correct: bool = True
    nan: bool = False
    inf_new: bool = False
    shape_mismatch: bool = False
    max_abs_diff: float = 0.0
    mean_diff: float = 0.0
    max_rel_diff: float = 0.0
    exceed_count: int = 0
    exceed_pct: float = 0.0
    fail_ci: bool = False


class MockRunner:
    """Deterministic test double keyed by (source fingerprint, variant).

    Also records every invocation, so it doubles as the spy runner for
    cascade-gating assertions. With a ``default`` scenario it answers
    unknown modules too (echo mode); otherwise unknown fingerprints raise
    ScriptedMissError.
    """

    def __init__(
        self,
        script: dict[tuple[str, str], MockScenario] | None = None,
        default: MockScenario | None = None,
    ):
        self.script = dict(script or {})
        self.default = default
        self.lock = threading.Lock()
        self.calls: list[tuple[str, str]] = []  # (kind, fingerprint)

    def add(self, source: str, variant: str, scenario: MockScenario) -> str:
        fp = fingerprint(source)
        self.script[(fp, variant)] = scenario
        return fp

    def count(self, kind: str) -> int:
        return sum(1 for k, _ in self.calls if k == kind)

    def _lookup(self, source: str, variant: str) -> MockScenario:
        fp = fingerprint(source)
        scenario = self.script.get((fp, variant), self.default)
        if scenario is None:
            raise ScriptedMissError(f"no scenario for fingerprint {fp[:12]}... variant {variant!r}")
        return scenario

    def run_ci(self, source: str, spec: ProblemSpec, variant: str, seed: int = 0) -> None:
        self.calls.append(("run_ci", fingerprint(source)))
        scenario = self._lookup(source, variant)
        if scenario.fail_ci:
            raise RunnerTransportError("scripted CI failure")

    def bench(
        self,
        source: str,
        spec: ProblemSpec,
        variant: str,
        iterations: int = 100,
        warmup: int = 200,
        seed: int = 0,
    ) -> list[float]:
        self.calls.append(("bench", fingerprint(source)))
        scenario = self._lookup(source, variant)
        cycle = itertools.cycle(scenario.times_us)
        return [next(cycle) for _ in range(iterations)]

    def compare(
        self,
        original_source: str,
        candidate_source: str,
        spec: ProblemSpec,
        variant: str,
        rtol: float = 1e-2,
        atol: float = 1e-5,
        iterations: int = 10,
        warmup: int = 2,
        seed: int = 0,
    ) -> CompareReply:
        self.calls.append(("compare", fingerprint(candidate_source)))
        original = self._lookup(original_source, variant)
        candidate = self._lookup(candidate_source, variant)
        take = lambda times: [t for t, _ in zip(itertools.cycle(times), range(max(1, iterations)))]
        return CompareReply(
            correct=candidate.correct,
            original_times_us=take(original.times_us),
            optimized_times_us=take(candidate.times_us),
            nan=candidate.nan,
            inf_new=candidate.inf_new,
            shape_mismatch=candidate.shape_mismatch,
            max_abs_diff=candidate.max_abs_diff,
            mean_diff=candidate.mean_diff,
            max_rel_diff=candidate.max_rel_diff,
            exceed_count=candidate.exceed_count,
            exceed_pct=candidate.exceed_pct,
        )


class SubprocessRunner:
    """Client side of wire protocol v1 over a child-process pipe.

    The harness is launched once and serves requests until closed. Every
    request carries an id; replies must echo it. Any channel-level fault
    (dead process, unparseable or mismatched reply) raises
    RunnerTransportError, which the verifier reports as infrastructure
    failure, never as a kernel verdict.
    """

    def __init__(
        self,
        device: str = "cpu",
        seed: int = 1234,
        harness_argv: list[str] | None = None,
    ):
        self.device = device
        self.seed = seed
        self.lock = threading.Lock()
        self._id_counter = itertools.count(1)
        argv = harness_argv or [
            sys.executable, "-m", "xpu_harness", "--device", device, "--seed", str(seed),
        ]
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
            )
        except OSError as exc:
            raise RunnerTransportError(f"cannot launch harness {argv!r}: {exc}") from exc

    def _request(self, kind: str, payload: dict) -> dict:
        if self._proc.poll() is not None:
            raise RunnerTransportError("harness process has exited")
        request_id = f"req-{next(self._id_counter)}"
        message = {"protocol_version": PROTOCOL_VERSION, "id": request_id, "kind": kind}
        message.update(payload)
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
            line = self._proc.stdout.readline()
        except (BrokenPipeError, OSError) as exc:
            raise RunnerTransportError(f"harness pipe failed: {exc}") from exc
        if not line:
            raise RunnerTransportError("harness closed the pipe without replying")
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RunnerTransportError(f"unparseable harness reply: {line!r}") from exc
        if reply.get("id") != request_id:
            raise RunnerTransportError(
                f"reply id {reply.get('id')!r} does not echo request id {request_id!r}"
            )
        if not reply.get("ok"):
            error = reply.get("error") or {}
            raise RunnerTransportError(
                f"harness error [{error.get('class', 'Unknown')}]: {error.get('message', '?')}"
            )
        return reply.get("result") or {}

    def run_ci(self, source: str, spec: ProblemSpec, variant: str, seed: int | None = None) -> None:
        self._request(
            "run_ci",
            {
                "module_source": source,
                "spec_yaml": spec.raw_yaml,
                "variant": variant,
                "seed": self.seed if seed is None else seed,
            },
        )

    def bench(
        self,
        source: str,
        spec: ProblemSpec,
        variant: str,
        iterations: int = 100,
        warmup: int = 200,
        seed: int | None = None,
    ) -> list[float]:
        result = self._request(
            "bench",
            {
                "module_source": source,
                "spec_yaml": spec.raw_yaml,
                "variant": variant,
                "iterations": iterations,
                "warmup": warmup,
                "seed": self.seed if seed is None else seed,
            },
        )
        times = result.get("times_us")
        if not isinstance(times, list):
            raise RunnerTransportError(f"bench reply missing times_us: {result!r}")
        return [float(t) for t in times]

    def compare(
        self,
        original_source: str,
        candidate_source: str,
        spec: ProblemSpec,
        variant: str,
        rtol: float = 1e-2,
        atol: float = 1e-5,
        iterations: int = 10,
        warmup: int = 2,
        seed: int | None = None,
    ) -> CompareReply:
        result = self._request(
            "compare",
            {
                "original_source": original_source,
                "candidate_source": candidate_source,
                "spec_yaml": spec.raw_yaml,
                "variant": variant,
                "rtol": rtol,
                "atol": atol,
                "iterations": iterations,
                "warmup": warmup,
                "seed": self.seed if seed is None else seed,
            },
        )
        try:
            return CompareReply(
                correct=bool(result["correct"]),
                original_times_us=[float(t) for t in result["original_times_us"]],
                optimized_times_us=[float(t) for t in result["optimized_times_us"]],
                nan=bool(result.get("nan", False)),
                inf_new=bool(result.get("inf_new", False)),
                shape_mismatch=bool(result.get("shape_mismatch", False)),
                max_abs_diff=float(result.get("max_abs_diff", 0.0)),
                mean_diff=float(result.get("mean_diff", 0.0)),
                max_rel_diff=float(result.get("max_rel_diff", 0.0)),
                exceed_count=int(result.get("exceed_count", 0)),
                exceed_pct=float(result.get("exceed_pct", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise RunnerTransportError(f"malformed compare reply: {exc}") from exc

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
