"""Analytic cost models for a mobile SoC with a GPU, a systolic-array NPU and
shared DRAM.

All latencies are in microseconds and carried as floats; nothing is rounded
until it reaches a report.  Every function here is a pure function of its
arguments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Mapping

HARDWARE_SCHEMA = "hetsoc.hardware/1"

# W4A16: 4-bit weights plus one fp16 scale per group.
W4A16_GROUP = 128
FP16_BYTES = 2.0

_MAX_ELEMENTS = 2**62


class Device(str, Enum):
    CPU = "CPU"
    GPU = "GPU"
    NPU = "NPU"


class SyncKind(str, Enum):
    NAIVE = "Naive"
    FAST = "Fast"


class Phase(str, Enum):
    PREFILL = "Prefill"
    DECODING = "Decoding"


class HardwareError(ValueError):
    pass


def w4a16_bytes_per_element() -> float:
    return 0.5 + FP16_BYTES / W4A16_GROUP


@dataclass(frozen=True)
class TensorShape:
    rows: int
    cols: int

    def __post_init__(self):
        if not isinstance(self.rows, int) or not isinstance(self.cols, int):
            raise HardwareError(f"tensor dims must be integers, got {self.rows}x{self.cols}")
        if self.rows < 1 or self.cols < 1:
            raise HardwareError(f"tensor dims must be >= 1, got {self.rows}x{self.cols}")
        if self.rows * self.cols > _MAX_ELEMENTS:
            raise OverflowError(f"element count of {self.rows}x{self.cols} overflows")

    @property
    def element_count(self) -> int:
        return self.rows * self.cols

    def transposed(self) -> TensorShape:
        return TensorShape(self.cols, self.rows)

    def __str__(self) -> str:
        return f"[{self.rows}, {self.cols}]"


@dataclass(frozen=True)
class MatmulSpec:
    """``a @ b`` with ``a = [M, N]`` streamed and ``b = [N, K]`` stationary."""

    a: TensorShape
    b: TensorShape
    element_bytes_a: float = FP16_BYTES
    element_bytes_b: float = FP16_BYTES
    element_bytes_out: float = FP16_BYTES

    def __post_init__(self):
        if self.a.cols != self.b.rows:
            raise HardwareError(f"shared dimension mismatch: {self.a} x {self.b}")
        for name in ("element_bytes_a", "element_bytes_b", "element_bytes_out"):
            if getattr(self, name) <= 0:
                raise HardwareError(f"{name} must be positive")
        if self.m * self.n * self.k > _MAX_ELEMENTS:
            raise OverflowError(f"M*N*K overflows for {self.a} x {self.b}")

    @classmethod
    def of(cls, m: int, n: int, k: int, **bytes_kw) -> MatmulSpec:
        return cls(TensorShape(m, n), TensorShape(n, k), **bytes_kw)

    @property
    def m(self) -> int:
        return self.a.rows

    @property
    def n(self) -> int:
        return self.a.cols

    @property
    def k(self) -> int:
        return self.b.cols

    @property
    def flops(self) -> int:
        return 2 * self.m * self.n * self.k

    @property
    def out_elements(self) -> int:
        return self.m * self.k

    @property
    def total_bytes(self) -> float:
        return (
            self.a.element_count * self.element_bytes_a
            + self.b.element_count * self.element_bytes_b
            + self.out_elements * self.element_bytes_out
        )

    def exchanged(self) -> MatmulSpec:
        """``[M,N]x[N,K] -> ([K,N]x[N,M])^T``: swap operand roles, same FLOPs."""
        return MatmulSpec(
            self.b.transposed(),
            self.a.transposed(),
            element_bytes_a=self.element_bytes_b,
            element_bytes_b=self.element_bytes_a,
            element_bytes_out=self.element_bytes_out,
        )


def _positive(obj, *names):
    for name in names:
        if not getattr(obj, name) > 0:
            raise HardwareError(f"{type(obj).__name__}.{name} must be > 0")


@dataclass(frozen=True)
class GpuParams:
    peak_flops_effective: float = 1e12
    mem_bandwidth: float = 45e9
    fixed_kernel_overhead: float = 10.0

    def __post_init__(self):
        _positive(self, "peak_flops_effective", "mem_bandwidth", "fixed_kernel_overhead")


@dataclass(frozen=True)
class NpuParams:
    array_dim: int = 32
    array_count: int = 1
    peak_flops_effective: float = 1e13
    weight_stream_bandwidth: float = 45e9
    # Rate at which the stationary operand is (re)loaded into the arrays.
    stationary_load_bandwidth: float = 7.5e9
    input_buffer_rows: int = 16384
    fixed_kernel_overhead: float = 50.0

    def __post_init__(self):
        if self.array_dim < 1 or self.array_count < 1 or self.input_buffer_rows < 1:
            raise HardwareError("NPU array_dim, array_count and input_buffer_rows must be >= 1")
        _positive(self, "peak_flops_effective", "weight_stream_bandwidth", "stationary_load_bandwidth")
        if self.fixed_kernel_overhead < 0:
            raise HardwareError("NpuParams.fixed_kernel_overhead must be >= 0")


@dataclass(frozen=True)
class MemoryParams:
    soc_bandwidth_cap: float = 61.9e9
    per_device_cap: Mapping[Device, float] = field(
        default_factory=lambda: {Device.CPU: 45e9, Device.GPU: 45e9, Device.NPU: 45e9}
    )
    theoretical_bandwidth: float = 68e9

    def __post_init__(self):
        _positive(self, "soc_bandwidth_cap", "theoretical_bandwidth")
        caps = {Device(d): float(v) for d, v in self.per_device_cap.items()}
        object.__setattr__(self, "per_device_cap", caps)
        if self.soc_bandwidth_cap > self.theoretical_bandwidth:
            raise HardwareError("soc_bandwidth_cap exceeds theoretical_bandwidth")
        for d, cap in caps.items():
            if not 0 < cap <= self.theoretical_bandwidth:
                raise HardwareError(f"per-device cap for {d.value} must be in (0, theoretical]")

    def __hash__(self):
        return hash((self.soc_bandwidth_cap, tuple(sorted(self.per_device_cap.items())), self.theoretical_bandwidth))


@dataclass(frozen=True)
class SyncParams:
    naive_sync: float = 400.0
    sleep_quantum: float = 100.0
    poll_slice: float = 5.0
    submit_cost: float = 30.0
    copy_cost_per_byte: float = 1.0 / 10e9

    def __post_init__(self):
        if not self.naive_sync > self.sleep_quantum > self.poll_slice >= 0:
            raise HardwareError("SyncParams requires naive_sync > sleep_quantum > poll_slice >= 0")
        if self.submit_cost < 0 or self.copy_cost_per_byte < 0:
            raise HardwareError("submit_cost and copy_cost_per_byte must be >= 0")


@dataclass(frozen=True)
class GraphGenParams:
    base: float = 10_000.0
    per_element: float = 1.57e-3

    def __post_init__(self):
        if self.base < 0 or self.per_element < 0:
            raise HardwareError("GraphGenParams must be non-negative")


@dataclass(frozen=True)
class HardwareConfig:
    gpu: GpuParams = field(default_factory=GpuParams)
    npu: NpuParams = field(default_factory=NpuParams)
    memory: MemoryParams = field(default_factory=MemoryParams)
    sync: SyncParams = field(default_factory=SyncParams)
    graph_gen: GraphGenParams = field(default_factory=GraphGenParams)
    unified_memory: bool = True

    def with_sync(self, **changes) -> HardwareConfig:
        return replace(self, sync=replace(self.sync, **changes))


# --------------------------------------------------------------------------
# Latency models


def gpu_matmul_latency(spec: MatmulSpec, gpu: GpuParams) -> float:
    compute = spec.flops / gpu.peak_flops_effective * 1e6
    memory = spec.total_bytes / gpu.mem_bandwidth * 1e6
    return max(compute, memory) + gpu.fixed_kernel_overhead


def gpu_memory_latency(nbytes: float, gpu: GpuParams) -> float:
    """Elementwise kernel: purely bandwidth bound."""
    return nbytes / gpu.mem_bandwidth * 1e6 + gpu.fixed_kernel_overhead


def _pad(x: int, tile: int) -> int:
    return -(-x // tile) * tile


def npu_matmul_latency(spec: MatmulSpec, npu: NpuParams) -> float:
    """Weight-stationary systolic model.

    Dimensions are padded to the tile edge, so latency is a step function of
    each dimension.  ``b`` stays resident in the arrays while ``a`` streams
    through; the resident operand is reloaded once per ``input_buffer_rows``
    rows of ``a``.  Compute and streaming overlap, reloads do not.
    """
    d = npu.array_dim
    m, n, k = _pad(spec.m, d), _pad(spec.n, d), _pad(spec.k, d)
    compute = 2.0 * m * n * k / npu.peak_flops_effective
    stream = m * n * spec.element_bytes_a / npu.weight_stream_bandwidth
    passes = -(-m // npu.input_buffer_rows)
    reload = passes * n * k * spec.element_bytes_b / npu.stationary_load_bandwidth
    return (max(compute, stream) + reload) * 1e6 + npu.fixed_kernel_overhead


def graph_generation_latency(spec: MatmulSpec, g: GraphGenParams) -> float:
    elements = spec.a.element_count + spec.b.element_count + spec.out_elements
    return g.base + g.per_element * elements


@dataclass(frozen=True)
class SyncOutcome:
    overhead: float
    # slept - actual_wait; negative when the waiter woke before the kernel ended
    wake_error: float
    slept: float = 0.0
    polled: float = 0.0


def sync_cost(
    kind: SyncKind, predicted_wait: float, s: SyncParams, actual_wait: float | None = None
) -> SyncOutcome:
    """Cost of detecting a kernel's completion from the CPU control plane.

    ``overhead`` is the time charged after the kernel really finished.  The
    fast path plans to sleep whole quanta, waking at least one quantum before
    the predicted end, and checks the shared completion flag at every quantum
    boundary; once the sleep budget is spent it polls the flag.
    """
    if predicted_wait < 0:
        raise ValueError("predicted_wait must be >= 0")
    actual = predicted_wait if actual_wait is None else actual_wait
    if actual < 0:
        raise ValueError("actual_wait must be >= 0")
    if SyncKind(kind) is SyncKind.NAIVE:
        return SyncOutcome(overhead=s.naive_sync, wake_error=0.0, slept=actual)
    q = s.sleep_quantum
    planned = max(0, math.floor(predicted_wait / q) - 1) * q
    if actual < planned:
        # over-predicted: caught at the first quantum boundary after completion
        slept = math.ceil(actual / q) * q
        return SyncOutcome(overhead=s.poll_slice + slept - actual, wake_error=planned - actual,
                           slept=slept, polled=s.poll_slice)
    polled = actual - planned + s.poll_slice
    return SyncOutcome(overhead=s.poll_slice, wake_error=planned - actual, slept=planned, polled=polled)


def sync_points_budget(phase: Phase, kind: SyncKind, s: SyncParams) -> float:
    """Per-op sync charge used by the solver when the NPU takes part.

    Two completion detections (hand-off into the NPU and the merge back) with
    a perfect prediction, plus the delayed GPU submission in prefill.
    """
    per_point = sync_cost(kind, 0.0, s).overhead
    submit = s.submit_cost if Phase(phase) is Phase.PREFILL else 0.0
    return 2 * per_point + submit


def effective_bandwidth(demands: Mapping[Device, float], m: MemoryParams) -> dict[Device, float]:
    alloc = {}
    for dev, demand in demands.items():
        if demand < 0:
            raise ValueError(f"negative bandwidth demand for {dev}")
        dev = Device(dev)
        alloc[dev] = min(demand, m.per_device_cap.get(dev, m.soc_bandwidth_cap))
    total = sum(alloc.values())
    if total > m.soc_bandwidth_cap:
        scale = m.soc_bandwidth_cap / total
        alloc = {d: v * scale for d, v in alloc.items()}
    return alloc


def submit_cost(s: SyncParams) -> float:
    return s.submit_cost


# --------------------------------------------------------------------------
# JSON


_UNITS = {
    GpuParams: {
        "peak_flops_effective": "peak_flops_per_s",
        "mem_bandwidth": "mem_bandwidth_bytes_per_s",
        "fixed_kernel_overhead": "fixed_kernel_overhead_us",
    },
    NpuParams: {
        "array_dim": "array_dim",
        "array_count": "array_count",
        "peak_flops_effective": "peak_flops_per_s",
        "weight_stream_bandwidth": "weight_stream_bandwidth_bytes_per_s",
        "stationary_load_bandwidth": "stationary_load_bandwidth_bytes_per_s",
        "input_buffer_rows": "input_buffer_rows",
        "fixed_kernel_overhead": "fixed_kernel_overhead_us",
    },
    SyncParams: {
        "naive_sync": "naive_sync_us",
        "sleep_quantum": "sleep_quantum_us",
        "poll_slice": "poll_slice_us",
        "submit_cost": "submit_cost_us",
        "copy_cost_per_byte": "copy_cost_s_per_byte",
    },
    GraphGenParams: {
        "base": "base_us",
        "per_element": "per_element_us",
    },
}


def _section_to_json(obj) -> dict:
    names = _UNITS[type(obj)]
    return {names[f.name]: getattr(obj, f.name) for f in fields(obj)}


def _section_from_json(cls, doc: dict, where: str):
    names = _UNITS[cls]
    unknown = set(doc) - set(names.values())
    if unknown:
        raise HardwareError(f"{where}: unknown field(s) {sorted(unknown)}")
    kwargs = {}
    for attr, key in names.items():
        if key not in doc:
            raise HardwareError(f"{where}: missing field {key!r}")
        kwargs[attr] = doc[key]
    return cls(**kwargs)


def hardware_to_json(hw: HardwareConfig) -> dict:
    return {
        "schema": HARDWARE_SCHEMA,
        "gpu": _section_to_json(hw.gpu),
        "npu": _section_to_json(hw.npu),
        "memory": {
            "soc_bandwidth_cap_bytes_per_s": hw.memory.soc_bandwidth_cap,
            "per_device_cap_bytes_per_s": {d.value: v for d, v in sorted(hw.memory.per_device_cap.items())},
            "theoretical_bandwidth_bytes_per_s": hw.memory.theoretical_bandwidth,
        },
        "sync": _section_to_json(hw.sync),
        "graph_gen": _section_to_json(hw.graph_gen),
        "unified_memory": hw.unified_memory,
    }


def hardware_from_json(doc: dict) -> HardwareConfig:
    if doc.get("schema") != HARDWARE_SCHEMA:
        raise HardwareError(f"expected schema {HARDWARE_SCHEMA!r}, got {doc.get('schema')!r}")
    expected = {"schema", "gpu", "npu", "memory", "sync", "graph_gen", "unified_memory"}
    if set(doc) != expected:
        raise HardwareError(f"hardware document fields must be exactly {sorted(expected)}")
    mem = doc["memory"]
    mem_keys = {"soc_bandwidth_cap_bytes_per_s", "per_device_cap_bytes_per_s", "theoretical_bandwidth_bytes_per_s"}
    if set(mem) != mem_keys:
        raise HardwareError(f"memory: fields must be exactly {sorted(mem_keys)}")
    if not isinstance(doc["unified_memory"], bool):
        raise HardwareError("unified_memory must be a boolean")
    return HardwareConfig(
        gpu=_section_from_json(GpuParams, doc["gpu"], "gpu"),
        npu=_section_from_json(NpuParams, doc["npu"], "npu"),
        memory=MemoryParams(
            soc_bandwidth_cap=mem["soc_bandwidth_cap_bytes_per_s"],
            per_device_cap={Device(k): v for k, v in mem["per_device_cap_bytes_per_s"].items()},
            theoretical_bandwidth=mem["theoretical_bandwidth_bytes_per_s"],
        ),
        sync=_section_from_json(SyncParams, doc["sync"], "sync"),
        graph_gen=_section_from_json(GraphGenParams, doc["graph_gen"], "graph_gen"),
        unified_memory=doc["unified_memory"],
    )


def load_hardware(path: str | Path | None = None) -> HardwareConfig:
    """Read a hardware JSON file; ``None`` loads the shipped default."""
    if path is None:
        text = resources.files("hetsoc.data").joinpath("default_hardware.json").read_text()
    else:
        text = Path(path).read_text()
    return hardware_from_json(json.loads(text))


def default_hardware() -> HardwareConfig:
    return load_hardware(None)


def dump_hardware(hw: HardwareConfig) -> str:
    return json.dumps(hardware_to_json(hw), indent=2) + "\n"

