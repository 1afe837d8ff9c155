"""Deterministic discrete-event replay of an execution plan.

The CPU control plane hands partitioned work to the GPU and NPU, detects
completion through the configured synchronization protocol, and merges the
results.  Prefill kernels take their profiled durations; decoding matmuls
share DRAM bandwidth and are stretched whenever the combined demand of the
concurrently running devices exceeds the memory caps.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

from .hwmodel import (
    Device,
    HardwareConfig,
    Phase,
    SyncKind,
    effective_bandwidth,
    submit_cost,
    sync_cost,
)
from .modelspec import LayerOp, ModelSpec, ops_for_layer, partitionable_shapes
from .planner import (
    ActivationCentric,
    ExecutionPlan,
    Hybrid,
    Mode,
    OpPlan,
    PartitionStrategy,
    SolverConfig,
    WeightCentric,
    npu_graph_lengths,
    solve_model,
    uses_gpu,
    uses_npu,
)
from .profiler import ProfileTable, build_profile

GRAPH_CACHE_CAPACITY = 4
SUMMARY_SCHEMA = "hetsoc.simresult/1"


class SimError(ValueError):
    pass


class EventKind(str, Enum):
    SUBMIT = "Submit"
    KERNEL_START = "KernelStart"
    KERNEL_END = "KernelEnd"
    SYNC_SLEEP = "SyncSleep"
    SYNC_POLL = "SyncPoll"
    GRAPH_GEN = "GraphGen"
    MERGE = "Merge"


_DEVICE_ORDER = {Device.CPU: 0, Device.GPU: 1, Device.NPU: 2}
# at equal timestamps a kernel must end before the next one starts
_KIND_ORDER = {EventKind.KERNEL_END: 0}


@dataclass(frozen=True)
class SimEvent:
    timestamp: float
    device: Device
    kind: EventKind
    op_id: str

    def sort_key(self):
        return (self.timestamp, _DEVICE_ORDER[self.device], self.op_id, _KIND_ORDER.get(self.kind, 1))

    def to_json(self) -> dict:
        return {"timestamp_us": self.timestamp, "device": self.device.value, "kind": self.kind.value, "op_id": self.op_id}


@dataclass(frozen=True)
class SimResult:
    prefill_latency: float | None
    decode_latency_per_token: float | None
    busy_time: dict
    achieved_bandwidth: float | None
    timeline: tuple[SimEvent, ...]
    sync_overhead_total: float
    end_time: float = 0.0
    graph_gen_total: float = 0.0
    # (timestamp, summed allocation in bytes/s) at each decoding contention interval
    bandwidth_trace: tuple[tuple[float, float], ...] = ()

    @property
    def tokens_per_second(self) -> float | None:
        if self.decode_latency_per_token is None:
            return None
        return 1e6 / self.decode_latency_per_token

    @property
    def total_latency(self) -> float:
        return self.end_time


def partition_flops(op: LayerOp, strategy: PartitionStrategy) -> tuple[int, int]:
    """Useful (GPU, NPU) FLOPs of a partitioned op; padding waste excluded."""
    if not op.partitionable:
        return 0, 0
    rows, cols = op.kernel_shape.rows, op.kernel_shape.cols
    s = op.seq_len

    def f(length, r):
        return 2 * length * cols * r

    if isinstance(strategy, WeightCentric):
        return f(s, strategy.gpu_rows), f(s, strategy.npu_rows)
    if isinstance(strategy, ActivationCentric):
        return f(strategy.gpu_dynamic_len, rows), f(sum(strategy.npu_segments), rows)
    if isinstance(strategy, Hybrid):
        return f(s, strategy.weight_gpu_rows), f(s, strategy.weight_npu_rows)
    if uses_npu(strategy):
        return 0, f(s, rows)
    return f(s, rows), 0


def _part_bytes(op: LayerOp, strategy: PartitionStrategy) -> tuple[float, float]:
    """(GPU, NPU) bytes streamed from DRAM by each partition."""
    if not op.partitionable:
        return op.activation_bytes, 0.0
    w = op.weight_bytes
    rows = op.kernel_shape.rows
    if isinstance(strategy, WeightCentric):
        return w * strategy.gpu_rows / rows, w * strategy.npu_rows / rows
    if isinstance(strategy, Hybrid):
        return w * strategy.weight_gpu_rows / rows, w * strategy.weight_npu_rows / rows
    if isinstance(strategy, ActivationCentric):
        return w, w
    if uses_npu(strategy):
        return 0.0, w
    return w, 0.0


class _Engine:
    def __init__(self, model: ModelSpec, hw: HardwareConfig, sync_kind: SyncKind):
        self.model = model
        self.hw = hw
        self.sync_kind = SyncKind(sync_kind)
        self.events: list[SimEvent] = []
        self.busy = {Device.CPU: 0.0, Device.GPU: 0.0, Device.NPU: 0.0}
        self.t = 0.0
        self.cpu = 0.0
        self.gpu_free = 0.0
        self.npu_free = 0.0
        self.gpu_pre_submitted = False
        self.last_gpu_kernel: tuple[float, float] | None = None  # (duration, predicted)
        self.predictions: dict = {}  # (phase, op index, point) -> last measured wait
        self.graph_cache: dict = {}
        self.sync_total = 0.0
        self.graph_total = 0.0
        self.bw_trace: list[tuple[float, float]] = []
        self.seq = 0
        self.bytes_moved = 0.0
        self.graph_mode = False

    def emit(self, ts, device, kind, op_id):
        self.events.append(SimEvent(ts, device, kind, op_id))

    # -- synchronization -------------------------------------------------
    def _sync(self, start: float, predicted: float, actual: float, op_id: str) -> float:
        out = sync_cost(self.sync_kind, predicted, self.hw.sync, actual)
        if self.sync_kind is SyncKind.FAST:
            if out.slept > 0:
                self.emit(start, Device.CPU, EventKind.SYNC_SLEEP, op_id)
            self.emit(start + actual + out.overhead - self.hw.sync.poll_slice, Device.CPU, EventKind.SYNC_POLL, op_id)
            self.busy[Device.CPU] += out.polled
        else:
            self.emit(start, Device.CPU, EventKind.SYNC_SLEEP, op_id)
            self.busy[Device.CPU] += out.overhead
        self.sync_total += out.overhead
        return out.overhead

    # -- decoding contention -------------------------------------------
    def _contend(self, start: float, flows: dict) -> dict:
        """Run concurrent flows {device: (bytes, natural_us)}; return finish times."""
        rem = {d: b for d, (b, _) in flows.items()}
        demand = {d: (b / (dur * 1e-6) if dur > 0 else 0.0) for d, (b, dur) in flows.items()}
        finish = {}
        now = start
        while rem:
            alloc = effective_bandwidth({d: demand[d] for d in rem}, self.hw.memory)
            self.bw_trace.append((now, sum(alloc.values())))
            left = {d: (rem[d] / alloc[d] * 1e6 if alloc[d] > 0 else 0.0) for d in rem}
            step = min(left.values())
            now += step
            for d in list(rem):
                if left[d] == step:
                    finish[d] = now
                    del rem[d]
                else:
                    rem[d] -= alloc[d] * step * 1e-6
        return finish

    def _durations(self, phase: Phase, op: LayerOp, p: OpPlan, start: float) -> tuple[float, float]:
        """(gpu_end, npu_end) for parts launched at ``start``; -inf when unused."""
        ev = p.chosen
        g_used, n_used = uses_gpu(ev.strategy), uses_npu(ev.strategy)
        if phase is Phase.PREFILL:
            g_end = max(start, self.gpu_free) + ev.t_gpu if g_used else float("-inf")
            n_end = max(start, self.npu_free) + ev.t_npu if n_used else float("-inf")
            return g_end, n_end
        gb, nb = _part_bytes(op, ev.strategy)
        flows = {}
        if g_used:
            flows[Device.GPU] = (gb, ev.t_gpu)
        if n_used:
            flows[Device.NPU] = (nb, ev.t_npu)
        self.bytes_moved += gb * g_used + nb * n_used
        fin = self._contend(start, flows)
        return fin.get(Device.GPU, float("-inf")), fin.get(Device.NPU, float("-inf"))

    # -- one operator ------------------------------------------------------
    def run_op(self, phase: Phase, tag: str, li: int, oi: int, p: OpPlan):
        op = p.op
        ev = p.chosen
        op_id = f"{self.seq:07d}:{tag}:L{li}:{op.kind.value}"
        self.seq += 1
        if not uses_npu(ev.strategy):
            if self.gpu_pre_submitted:
                self.gpu_pre_submitted = False
                ready = self.t
            else:
                sub = submit_cost(self.hw.sync)
                self.emit(self.cpu, Device.CPU, EventKind.SUBMIT, op_id)
                self.busy[Device.CPU] += sub
                self.cpu += sub
                ready = max(self.t, self.cpu)
            start = max(ready, self.gpu_free)
            g_end, _ = self._durations(phase, op, p, start)
            self.emit(start, Device.GPU, EventKind.KERNEL_START, op_id)
            self.emit(g_end, Device.GPU, EventKind.KERNEL_END, op_id)
            self.busy[Device.GPU] += g_end - start
            pred_key = (phase, oi, "gpu")
            predicted = self.predictions.get(pred_key, ev.t_gpu)
            self.predictions[pred_key] = g_end - start
            self.last_gpu_kernel = (g_end - start, predicted)
            self.gpu_free = g_end
            self.t = g_end
            return

        # hand-off: the CPU detects completion of the preceding GPU kernel
        actual, predicted = self.last_gpu_kernel or (0.0, 0.0)
        self.last_gpu_kernel = None
        det = max(self.t, self.cpu)
        s = det + self._sync(det - actual, predicted, actual, op_id)

        if self.graph_mode:
            key = (op.kind, op.kernel_shape)
            cache = self.graph_cache.setdefault(op.kind, OrderedDict())
            for n in npu_graph_lengths(ev.strategy, op.seq_len):
                if (key, n) in cache:
                    cache.move_to_end((key, n))
                    continue
                gen = ev.t_graph
                self.emit(s, Device.CPU, EventKind.GRAPH_GEN, op_id)
                self.busy[Device.CPU] += gen
                self.graph_total += gen
                s += gen
                cache[(key, n)] = True
                while len(cache) > GRAPH_CACHE_CAPACITY:
                    cache.popitem(last=False)

        g_end, n_end = self._durations(phase, op, p, s)
        if g_end != float("-inf"):
            g_start = max(s, self.gpu_free)
            self.emit(g_start, Device.GPU, EventKind.KERNEL_START, op_id)
            self.emit(g_end, Device.GPU, EventKind.KERNEL_END, op_id)
            self.busy[Device.GPU] += g_end - g_start
            self.gpu_free = g_end
        n_start = max(s, self.npu_free)
        self.emit(n_start, Device.NPU, EventKind.KERNEL_START, op_id)
        self.emit(n_end, Device.NPU, EventKind.KERNEL_END, op_id)
        self.busy[Device.NPU] += n_end - n_start
        self.npu_free = n_end

        last = max(g_end, n_end)
        pred_key = (phase, oi, "out")
        predicted = self.predictions.get(pred_key, max(ev.t_gpu, ev.t_npu))
        self.predictions[pred_key] = last - s
        merge = last + self._sync(s, predicted, last - s, op_id)
        self.emit(merge, Device.CPU, EventKind.MERGE, op_id)
        merge += ev.t_copy
        self.busy[Device.CPU] += ev.t_copy
        if phase is Phase.PREFILL:
            # submission of the next GPU kernel was held back behind the NPU
            sub = submit_cost(self.hw.sync)
            self.emit(merge, Device.CPU, EventKind.SUBMIT, op_id)
            self.busy[Device.CPU] += sub
            merge += sub
        self.gpu_pre_submitted = True
        self.t = merge
        self.cpu = merge

    def run_plan(self, plan: ExecutionPlan, tag: str):
        self.graph_mode = plan.mode is Mode.ONLINE_PREPARE
        for li, oi, p in plan.ops():
            self.run_op(plan.phase, tag, li, oi, p)


def _check_plan(plan: ExecutionPlan, model: ModelSpec):
    if plan.n_layers != model.n_layers:
        raise SimError(f"plan has {plan.n_layers} layers, model {model.name!r} has {model.n_layers}")
    expected = ops_for_layer(model, plan.phase, plan.seq_len)
    for li, layer in enumerate(plan.layers):
        if [p.op for p in layer] != expected:
            raise SimError(f"plan layer {li} does not match model {model.name!r} at length {plan.seq_len}")


def simulate_ops(
    op_plans,
    phase: Phase,
    hw: HardwareConfig,
    sync_kind: SyncKind = SyncKind.FAST,
    graph_mode: bool = False,
) -> SimResult:
    """Replay a bare sequence of solved ops (no model consistency check)."""
    phase = Phase(phase)
    eng = _Engine(None, hw, sync_kind)
    eng.graph_mode = graph_mode
    for oi, p in enumerate(op_plans):
        eng.run_op(phase, phase.value[0], 0, oi, p)
    prefill = phase is Phase.PREFILL
    return SimResult(
        prefill_latency=eng.t if prefill else None,
        decode_latency_per_token=None if prefill else eng.t,
        busy_time=dict(eng.busy),
        achieved_bandwidth=None if prefill else (eng.bytes_moved / (eng.t * 1e-6) if eng.t > 0 else 0.0),
        timeline=tuple(sorted(eng.events, key=SimEvent.sort_key)),
        sync_overhead_total=eng.sync_total,
        end_time=eng.t,
        graph_gen_total=eng.graph_total,
        bandwidth_trace=tuple(eng.bw_trace),
    )


def simulate(
    plan: ExecutionPlan,
    model: ModelSpec,
    hw: HardwareConfig,
    n_decode_tokens: int = 0,
    decode_plan: ExecutionPlan | None = None,
    sync_kind: SyncKind = SyncKind.FAST,
) -> SimResult:
    """Replay ``plan``; a decoding plan (``plan`` itself when it is one) is
    run ``n_decode_tokens`` times after any prefill."""
    if n_decode_tokens < 0:
        raise SimError("n_decode_tokens must be >= 0")
    if plan.phase is Phase.DECODING:
        if decode_plan is not None:
            raise SimError("decode_plan given twice")
        prefill_plan, decode_plan = None, plan
        if n_decode_tokens == 0:
            n_decode_tokens = 1
    else:
        prefill_plan = plan
        if n_decode_tokens and decode_plan is None:
            raise SimError("decoding tokens requested without a decoding plan")
    for p in (prefill_plan, decode_plan):
        if p is not None:
            _check_plan(p, model)
    if decode_plan is not None and decode_plan.phase is not Phase.DECODING:
        raise SimError("decode_plan must be a decoding plan")

    eng = _Engine(model, hw, sync_kind)
    prefill_latency = None
    if prefill_plan is not None:
        eng.run_plan(prefill_plan, "P")
        prefill_latency = eng.t
    decode_latency = bandwidth = None
    if n_decode_tokens and decode_plan is not None:
        t0 = eng.t
        for tok in range(n_decode_tokens):
            eng.run_plan(decode_plan, f"D{tok}")
        span = eng.t - t0
        decode_latency = span / n_decode_tokens
        bandwidth = eng.bytes_moved / (span * 1e-6) if span > 0 else 0.0
    timeline = tuple(sorted(eng.events, key=SimEvent.sort_key))
    return SimResult(
        prefill_latency=prefill_latency,
        decode_latency_per_token=decode_latency,
        busy_time=dict(eng.busy),
        achieved_bandwidth=bandwidth,
        timeline=timeline,
        sync_overhead_total=eng.sync_total,
        end_time=eng.t,
        graph_gen_total=eng.graph_total,
        bandwidth_trace=tuple(eng.bw_trace),
    )


# --------------------------------------------------------------------------
# Experiments


def default_table(model: ModelSpec, hw: HardwareConfig) -> ProfileTable:
    return build_profile(hw, partitionable_shapes(model))


@dataclass(frozen=True)
class ModeRow:
    mode: Mode
    seq_len: int
    result: SimResult

    @property
    def latency(self) -> float:
        if self.result.prefill_latency is not None:
            return self.result.prefill_latency
        return self.result.decode_latency_per_token


def compare_modes(
    model: ModelSpec,
    hw: HardwareConfig,
    phase: Phase,
    seq_len: int,
    modes,
    table: ProfileTable | None = None,
    n_decode_tokens: int = 1,
    config: SolverConfig = SolverConfig(),
) -> list[ModeRow]:
    modes = [Mode(m) for m in modes]
    if not modes:
        raise SimError("compare_modes needs at least one mode")
    table = table or default_table(model, hw)
    rows = []
    for mode in modes:
        plan = solve_model(model, phase, seq_len, table, hw, mode, config)
        res = simulate(plan, model, hw, n_decode_tokens if Phase(phase) is Phase.DECODING else 0)
        rows.append(ModeRow(mode, plan.seq_len, res))
    return rows


@dataclass(frozen=True)
class SyncAblation:
    fast: SimResult
    naive: SimResult
    speedup: float


def sync_ablation(
    model: ModelSpec,
    hw: HardwareConfig,
    phase: Phase,
    seq_len_or_tokens: int,
    mode: Mode = Mode.HETERO_TENSOR,
    table: ProfileTable | None = None,
) -> SyncAblation:
    """Same plan under fast and naive synchronization.

    ``seq_len_or_tokens`` is the prompt length for prefill and the number of
    generated tokens for decoding.
    """
    phase = Phase(phase)
    table = table or default_table(model, hw)
    seq_len = seq_len_or_tokens if phase is Phase.PREFILL else 1
    n_tok = seq_len_or_tokens if phase is Phase.DECODING else 0
    plan = solve_model(model, phase, seq_len, table, hw, mode)
    fast = simulate(plan, model, hw, n_tok, sync_kind=SyncKind.FAST)
    naive = simulate(plan, model, hw, n_tok, sync_kind=SyncKind.NAIVE)
    key = "prefill_latency" if phase is Phase.PREFILL else "decode_latency_per_token"
    return SyncAblation(fast, naive, getattr(naive, key) / getattr(fast, key))


# --------------------------------------------------------------------------
# Export


def export_timeline(result: SimResult) -> bytes:
    lines = [json.dumps(e.to_json(), sort_keys=True) for e in sorted(result.timeline, key=SimEvent.sort_key)]
    return "".join(l + "\n" for l in lines).encode("utf-8")


def parse_timeline(data: bytes) -> list[SimEvent]:
    out = []
    for line in data.decode("utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(SimEvent(d["timestamp_us"], Device(d["device"]), EventKind(d["kind"]), d["op_id"]))
    return out


def summary_to_json(result: SimResult) -> dict:
    return {
        "schema": SUMMARY_SCHEMA,
        "prefill_latency_us": result.prefill_latency,
        "decode_latency_per_token_us": result.decode_latency_per_token,
        "tokens_per_second": result.tokens_per_second,
        "busy_time_us": {d.value: v for d, v in sorted(result.busy_time.items(), key=lambda kv: _DEVICE_ORDER[kv[0]])},
        "achieved_bandwidth_bytes_per_s": result.achieved_bandwidth,
        "sync_overhead_total_us": result.sync_overhead_total,
        "graph_gen_total_us": result.graph_gen_total,
        "end_time_us": result.end_time,
        "n_events": len(result.timeline),
    }
