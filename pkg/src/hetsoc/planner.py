"""Per-operator tensor-partitioning solver.

For every partitionable matmul the solver enumerates the feasible ways to
run it (one device, padded, split by weight rows, split by sequence length,
or both), costs each one from the profile table and keeps the cheapest::

    T_total = min( max(T_gpu(p1), T_npu(p2)) + T_sync + T_copy,
                   T_gpu(all),
                   T_npu(all) + T_sync + T_copy )      with p1 + p2 = all
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Union

from .hwmodel import (
    Device,
    HardwareConfig,
    MatmulSpec,
    Phase,
    SyncKind,
    SyncParams,
    TensorShape,
    gpu_memory_latency,
    graph_generation_latency,
    npu_matmul_latency,
    sync_points_budget,
)
from .modelspec import LayerOp, ModelSpec, OpKind, ops_for_layer
from .profiler import ProfileTable, estimate_latency, kernel_matmul

PLAN_SCHEMA = "hetsoc.plan/1"


class PlanError(ValueError):
    pass


class Mode(str, Enum):
    GPU_ONLY = "GpuOnly"
    NPU_ONLY = "NpuOnly"
    HETERO_LAYER = "HeteroLayer"
    HETERO_TENSOR = "HeteroTensor"
    ONLINE_PREPARE = "OnlinePrepare"
    PADDING = "PaddingBaseline"
    NPU_PIPE = "NpuPipe"
    CHUNKED_PREFILL = "ChunkedPrefill"


# --------------------------------------------------------------------------
# Strategies


@dataclass(frozen=True)
class NoPartitionGpu:
    tag = "NoPartitionGpu"
    rank = 1


@dataclass(frozen=True)
class NoPartitionNpu:
    tag = "NoPartitionNpu"
    rank = 0


@dataclass(frozen=True)
class Padding:
    padded_len: int
    tag = "Padding"
    rank = 5


@dataclass(frozen=True)
class WeightCentric:
    gpu_rows: int
    npu_rows: int
    tag = "WeightCentric"
    rank = 2

    @property
    def gpu_fraction(self) -> float:
        return self.gpu_rows / (self.gpu_rows + self.npu_rows)


@dataclass(frozen=True)
class ActivationCentric:
    npu_segments: tuple[int, ...]
    gpu_dynamic_len: int
    tag = "ActivationCentric"
    rank = 3


@dataclass(frozen=True)
class Hybrid:
    npu_segments: tuple[int, ...]
    padded_remainder: int
    weight_gpu_rows: int
    weight_npu_rows: int
    tag = "Hybrid"
    rank = 4

    @property
    def gpu_fraction(self) -> float:
        return self.weight_gpu_rows / (self.weight_gpu_rows + self.weight_npu_rows)


PartitionStrategy = Union[NoPartitionGpu, NoPartitionNpu, Padding, WeightCentric, ActivationCentric, Hybrid]
STRATEGY_TYPES = {cls.tag: cls for cls in (NoPartitionGpu, NoPartitionNpu, Padding, WeightCentric, ActivationCentric, Hybrid)}


def uses_npu(strategy: PartitionStrategy) -> bool:
    if isinstance(strategy, NoPartitionGpu):
        return False
    if isinstance(strategy, Hybrid):
        return strategy.weight_npu_rows > 0
    return True


def uses_gpu(strategy: PartitionStrategy) -> bool:
    if isinstance(strategy, (NoPartitionNpu, Padding)):
        return False
    if isinstance(strategy, ActivationCentric):
        return strategy.gpu_dynamic_len > 0
    if isinstance(strategy, Hybrid):
        return strategy.weight_gpu_rows > 0
    return True


def npu_graph_lengths(strategy: PartitionStrategy, seq_len: int) -> list[int]:
    """Sequence lengths of the NPU kernels a strategy launches, in order."""
    if isinstance(strategy, NoPartitionNpu):
        return [seq_len]
    if isinstance(strategy, Padding):
        return [strategy.padded_len]
    if isinstance(strategy, WeightCentric):
        return [seq_len]
    if isinstance(strategy, ActivationCentric):
        return list(strategy.npu_segments)
    if isinstance(strategy, Hybrid) and strategy.weight_npu_rows:
        return list(strategy.npu_segments) + ([strategy.padded_remainder] if strategy.padded_remainder else [])
    return []


def strategy_to_json(s: PartitionStrategy) -> dict:
    doc = {"tag": s.tag}
    for name in getattr(s, "__dataclass_fields__", {}):
        v = getattr(s, name)
        doc[name] = list(v) if isinstance(v, tuple) else v
    return doc


def strategy_from_json(doc: dict) -> PartitionStrategy:
    cls = STRATEGY_TYPES.get(doc.get("tag"))
    if cls is None:
        raise PlanError(f"unknown strategy tag {doc.get('tag')!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items() if k != "tag"}
    return cls(**kwargs)


# --------------------------------------------------------------------------
# Evaluation records


@dataclass(frozen=True)
class CandidateEvaluation:
    strategy: PartitionStrategy
    t_gpu: float
    t_npu: float
    t_sync: float
    t_copy: float
    t_total: float
    # one-off graph generation attached to first use (OnlinePrepare only)
    t_graph: float = 0.0

    def to_json(self) -> dict:
        return {
            "strategy": strategy_to_json(self.strategy),
            "t_gpu_us": self.t_gpu,
            "t_npu_us": self.t_npu,
            "t_sync_us": self.t_sync,
            "t_copy_us": self.t_copy,
            "t_total_us": self.t_total,
            "t_graph_us": self.t_graph,
        }

    @classmethod
    def from_json(cls, doc: dict) -> CandidateEvaluation:
        return cls(
            strategy_from_json(doc["strategy"]),
            doc["t_gpu_us"], doc["t_npu_us"], doc["t_sync_us"], doc["t_copy_us"], doc["t_total_us"],
            doc.get("t_graph_us", 0.0),
        )


@dataclass(frozen=True)
class OpPlan:
    op: LayerOp
    chosen: CandidateEvaluation
    alternatives: tuple[CandidateEvaluation, ...] = ()


@dataclass(frozen=True)
class ExecutionPlan:
    phase: Phase
    seq_len: int
    mode: Mode
    layers: tuple[tuple[OpPlan, ...], ...]
    model_name: str = ""

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def ops(self):
        for li, layer in enumerate(self.layers):
            for oi, op_plan in enumerate(layer):
                yield li, oi, op_plan


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the candidate grid.

    Weight splits move NPU rows in steps of ``max(npu_min_subtensor,
    rows / grid_divisions)`` and keep each device's share within
    ``[min_share, 1 - min_share]``.
    """

    grid_divisions: int = 16
    min_share: float = 0.25
    sync_kind: SyncKind = SyncKind.FAST
    chunk_len: int = 256
    # overrides the per-op sync charge derived from SyncParams
    sync_budget: float | None = None

    def __post_init__(self):
        if self.grid_divisions < 1:
            raise PlanError("grid_divisions must be >= 1")
        if not 0 <= self.min_share < 0.5:
            raise PlanError("min_share must be in [0, 0.5)")


# --------------------------------------------------------------------------
# Operations


def order_exchange(spec: MatmulSpec) -> MatmulSpec:
    """``[M,N] x [N,K] -> ([K,N] x [N,M])^T``."""
    return spec.exchanged()


def prefer_exchange(spec: MatmulSpec, npu) -> MatmulSpec:
    """Apply the exchange only when it is strictly faster on the NPU."""
    swapped = spec.exchanged()
    return swapped if npu_matmul_latency(swapped, npu) < npu_matmul_latency(spec, npu) else spec


def standard_decomposition(seq_len: int, standard_lengths) -> tuple[list[int], int]:
    if seq_len < 1:
        raise PlanError("seq_len must be >= 1")
    lengths = sorted((n for n in set(standard_lengths) if n > 1), reverse=True)
    segments = []
    remaining = seq_len
    for n in lengths:
        while remaining >= n:
            segments.append(n)
            remaining -= n
    return segments, remaining


def weight_splits(rows: int, npu_min_subtensor: int, config: SolverConfig) -> list[int]:
    """Feasible NPU row counts for a weight-centric split (interior only)."""
    raw = max(npu_min_subtensor, rows / config.grid_divisions)
    step = math.ceil(raw / npu_min_subtensor) * npu_min_subtensor
    lo = config.min_share * rows
    hi = rows - lo
    return [n for n in range(step, rows, step) if lo <= n <= hi]


def _next_standard(lengths: list[int], n: int) -> int | None:
    fits = [x for x in lengths if x >= n]
    return min(fits) if fits else None


def enumerate_candidates(
    op: LayerOp, phase: Phase, seq_len: int, table: ProfileTable, config: SolverConfig = SolverConfig()
) -> list[PartitionStrategy]:
    if not op.partitionable:
        return [NoPartitionGpu()]
    shape = op.kernel_shape
    npu_lengths = table.lengths_for(Device.NPU, shape)
    out: list[PartitionStrategy] = [NoPartitionGpu()]
    if not npu_lengths:
        return out
    splits = weight_splits(shape.rows, table.npu_min_subtensor, config)
    if seq_len in npu_lengths:
        out.append(NoPartitionNpu())
        out.extend(WeightCentric(shape.rows - n, n) for n in splits)
        return out
    prefill = table.prefill_lengths(shape)
    segments, remainder = standard_decomposition(seq_len, prefill)
    if segments:
        # remainder 0: the multi-segment split keeps the whole op on the NPU
        out.append(ActivationCentric(tuple(segments), remainder))
    padded_rem = _next_standard(prefill, remainder) if remainder else 0
    if padded_rem is not None:
        out.extend(Hybrid(tuple(segments), padded_rem, shape.rows - n, n) for n in splits)
    padded = _next_standard(npu_lengths, seq_len)
    if padded is not None:
        out.append(Padding(padded))
    return out


def sync_charge(phase: Phase, sync: SyncParams, config: SolverConfig) -> float:
    if config.sync_budget is not None:
        return config.sync_budget
    return sync_points_budget(phase, config.sync_kind, sync)


def copy_charge(op: LayerOp, strategy: PartitionStrategy, sync: SyncParams, unified_memory: bool) -> float:
    if unified_memory or not uses_npu(strategy):
        return 0.0
    out_bytes = op.seq_len * op.kernel_shape.rows * 2.0
    return (op.activation_bytes + out_bytes) * sync.copy_cost_per_byte * 1e6


def evaluate_candidate(
    strategy: PartitionStrategy,
    op: LayerOp,
    phase: Phase,
    table: ProfileTable,
    sync: SyncParams,
    unified_memory: bool = True,
    config: SolverConfig = SolverConfig(),
) -> CandidateEvaluation:
    shape = op.kernel_shape
    rows = shape.rows
    s = op.seq_len

    def gpu(n):
        return estimate_latency(table, Device.GPU, shape, n)

    def npu(n):
        return table.lookup(Device.NPU, shape, n).latency

    if isinstance(strategy, NoPartitionGpu):
        t_gpu = gpu(s)
        return CandidateEvaluation(strategy, t_gpu, 0.0, 0.0, 0.0, t_gpu)
    if isinstance(strategy, NoPartitionNpu):
        t_gpu, t_npu = 0.0, npu(s)
    elif isinstance(strategy, Padding):
        t_gpu, t_npu = 0.0, npu(strategy.padded_len)
    elif isinstance(strategy, WeightCentric):
        if strategy.gpu_rows + strategy.npu_rows != rows:
            raise PlanError("weight-centric partitions must cover all rows")
        t_gpu = gpu(s) * strategy.gpu_rows / rows
        t_npu = npu(s) * strategy.npu_rows / rows
    elif isinstance(strategy, ActivationCentric):
        if sum(strategy.npu_segments) + strategy.gpu_dynamic_len != s:
            raise PlanError("activation-centric partitions must cover the sequence")
        t_npu = sum(npu(n) for n in strategy.npu_segments)
        t_gpu = gpu(strategy.gpu_dynamic_len) if strategy.gpu_dynamic_len else 0.0
    elif isinstance(strategy, Hybrid):
        if strategy.weight_gpu_rows + strategy.weight_npu_rows != rows:
            raise PlanError("hybrid weight partitions must cover all rows")
        npu_full = sum(npu(n) for n in npu_graph_lengths(strategy, s)) if strategy.weight_npu_rows else 0.0
        t_npu = npu_full * strategy.weight_npu_rows / rows
        t_gpu = gpu(s) * strategy.weight_gpu_rows / rows
    else:
        raise PlanError(f"unknown strategy {strategy!r}")
    t_sync = sync_charge(phase, sync, config)
    t_copy = copy_charge(op, strategy, sync, unified_memory)
    return CandidateEvaluation(strategy, t_gpu, t_npu, t_sync, t_copy, max(t_gpu, t_npu) + t_sync + t_copy)


def _pick(evals: list[CandidateEvaluation]) -> CandidateEvaluation:
    return min(evals, key=lambda e: (e.t_total, e.strategy.rank))


def glue_latency(op: LayerOp, hw: HardwareConfig) -> float:
    """Elementwise GPU ops: bandwidth-bound over their activation traffic."""
    if op.kind is OpKind.RMS_NORM:
        nbytes = 2 * op.activation_bytes
    elif op.kind is OpKind.SWIGLU:
        nbytes = 3 * op.activation_bytes
    else:
        nbytes = op.activation_bytes
    return gpu_memory_latency(nbytes, hw.gpu)


def solve_op(
    op: LayerOp,
    phase: Phase,
    seq_len: int,
    table: ProfileTable,
    hw: HardwareConfig,
    config: SolverConfig = SolverConfig(),
    allowed: tuple[type, ...] | None = None,
) -> OpPlan:
    if op.seq_len != seq_len:
        raise PlanError(f"op bound to length {op.seq_len}, asked to solve for {seq_len}")
    if not op.partitionable:
        t = glue_latency(op, hw)
        ev = CandidateEvaluation(NoPartitionGpu(), t, 0.0, 0.0, 0.0, t)
        return OpPlan(op, ev, (ev,))
    candidates = enumerate_candidates(op, phase, seq_len, table, config)
    if allowed is not None:
        candidates = [c for c in candidates if isinstance(c, allowed)]
    evals = [evaluate_candidate(c, op, phase, table, hw.sync, hw.unified_memory, config) for c in candidates]
    return OpPlan(op, _pick(evals), tuple(evals))


# --------------------------------------------------------------------------
# Whole-model plans


def _forced(op, phase, table, hw, config, strategy, t_graph=0.0, t_npu=None) -> OpPlan:
    ev = evaluate_candidate(strategy, op, phase, table, hw.sync, hw.unified_memory, config) if t_npu is None else None
    if ev is None:
        t_sync = sync_charge(phase, hw.sync, config)
        t_copy = copy_charge(op, strategy, hw.sync, hw.unified_memory)
        ev = CandidateEvaluation(strategy, 0.0, t_npu, t_sync, t_copy, t_npu + t_sync + t_copy, t_graph)
    return OpPlan(op, ev, (ev,))


def _npu_pipe(op: LayerOp, table: ProfileTable) -> Hybrid:
    prefill = table.prefill_lengths(op.kernel_shape)
    segments, remainder = standard_decomposition(op.seq_len, prefill)
    padded = _next_standard(prefill, remainder) if remainder else 0
    if padded is None:
        raise PlanError(f"no standard length >= {remainder} for {op.kernel_shape}")
    return Hybrid(tuple(segments), padded, 0, op.kernel_shape.rows)


def _chunked(op: LayerOp, table: ProfileTable, chunk: int) -> Hybrid:
    if chunk not in table.lengths_for(Device.NPU, op.kernel_shape):
        raise PlanError(f"chunk length {chunk} is not a profiled NPU length for {op.kernel_shape}")
    n_chunks = -(-op.seq_len // chunk)
    return Hybrid((chunk,) * (n_chunks - 1), chunk, 0, op.kernel_shape.rows)


def _npu_static(op: LayerOp, table: ProfileTable) -> PartitionStrategy:
    lengths = table.lengths_for(Device.NPU, op.kernel_shape)
    if op.seq_len in lengths:
        return NoPartitionNpu()
    padded = _next_standard(lengths, op.seq_len)
    return Padding(padded) if padded is not None else _npu_pipe(op, table)


def solve_mode_op(op: LayerOp, phase: Phase, table: ProfileTable, hw: HardwareConfig,
                  mode: Mode, config: SolverConfig = SolverConfig()) -> OpPlan:
    mode = Mode(mode)
    if not op.partitionable and mode is Mode.PADDING:
        # the padded activation flows through the elementwise ops as well
        padded = _next_standard(list(table.standard_lengths), op.seq_len) or op.seq_len
        t = glue_latency(replace(op, seq_len=padded), hw)
        ev = CandidateEvaluation(NoPartitionGpu(), t, 0.0, 0.0, 0.0, t)
        return OpPlan(op, ev, (ev,))
    if not op.partitionable or mode is Mode.GPU_ONLY:
        return solve_op(op, phase, op.seq_len, table, hw, config, allowed=(NoPartitionGpu,))
    if mode is Mode.HETERO_TENSOR:
        return solve_op(op, phase, op.seq_len, table, hw, config)
    if mode is Mode.HETERO_LAYER:
        return solve_op(op, phase, op.seq_len, table, hw, config, allowed=(NoPartitionGpu, NoPartitionNpu, Padding))
    if Phase(phase) is Phase.DECODING or op.seq_len in table.lengths_for(Device.NPU, op.kernel_shape):
        if mode is not Mode.ONLINE_PREPARE:
            return _forced(op, phase, table, hw, config, NoPartitionNpu())
    if mode in (Mode.NPU_ONLY, Mode.PADDING):
        return _forced(op, phase, table, hw, config, _npu_static(op, table))
    if mode is Mode.NPU_PIPE:
        return _forced(op, phase, table, hw, config, _npu_pipe(op, table))
    if mode is Mode.CHUNKED_PREFILL:
        return _forced(op, phase, table, hw, config, _chunked(op, table, config.chunk_len))
    if mode is Mode.ONLINE_PREPARE:
        spec = kernel_matmul(op.kernel_shape, op.seq_len, op.weight_precision)
        t_npu = npu_matmul_latency(prefer_exchange(spec, hw.npu), hw.npu)
        t_graph = graph_generation_latency(spec, hw.graph_gen)
        return _forced(op, phase, table, hw, config, NoPartitionNpu(), t_graph=t_graph, t_npu=t_npu)
    raise PlanError(f"unsupported mode {mode}")


def solve_model(
    model: ModelSpec,
    phase: Phase,
    seq_len: int,
    table: ProfileTable,
    hw: HardwareConfig,
    mode: Mode = Mode.HETERO_TENSOR,
    config: SolverConfig = SolverConfig(),
) -> ExecutionPlan:
    phase = Phase(phase)
    if phase is Phase.DECODING:
        seq_len = 1
    ops = ops_for_layer(model, phase, seq_len)
    # every decoder block is identical, so one solve per op serves all layers
    layer = tuple(solve_mode_op(op, phase, table, hw, mode, config) for op in ops)
    return ExecutionPlan(phase, seq_len, Mode(mode), (layer,) * model.n_layers, model.name)


# --------------------------------------------------------------------------
# JSON


def plan_to_json(plan: ExecutionPlan) -> dict:
    records = []
    for li, oi, p in plan.ops():
        op = p.op
        records.append({
            "layer": li,
            "index": oi,
            "kind": op.kind.value,
            "weight_shape": [op.weight_shape.rows, op.weight_shape.cols] if op.weight_shape else None,
            "seq_len": op.seq_len,
            "weight_precision": op.weight_precision.value,
            "activation_dim": op.activation_dim,
            **p.chosen.to_json(),
            "alternatives": [e.to_json() for e in p.alternatives],
        })
    return {
        "schema": PLAN_SCHEMA,
        "model": plan.model_name,
        "phase": plan.phase.value,
        "seq_len": plan.seq_len,
        "mode": plan.mode.value,
        "n_layers": plan.n_layers,
        "ops": records,
    }


def plan_from_json(doc: dict) -> ExecutionPlan:
    from .modelspec import Precision

    if doc.get("schema") != PLAN_SCHEMA:
        raise PlanError(f"expected schema {PLAN_SCHEMA!r}")
    layers: list[list[OpPlan]] = [[] for _ in range(doc["n_layers"])]
    for r in doc["ops"]:
        ws = TensorShape(*r["weight_shape"]) if r["weight_shape"] else None
        op = LayerOp(OpKind(r["kind"]), r["seq_len"], ws, Precision(r["weight_precision"]), r["activation_dim"])
        ev = CandidateEvaluation.from_json(r)
        alts = tuple(CandidateEvaluation.from_json(a) for a in r.get("alternatives", [])) or (ev,)
        layers[r["layer"]].append(OpPlan(op, ev, alts))
    return ExecutionPlan(Phase(doc["phase"]), doc["seq_len"], Mode(doc["mode"]),
                         tuple(tuple(l) for l in layers), doc.get("model", ""))


def dump_plan(plan: ExecutionPlan) -> str:
    return json.dumps(plan_to_json(plan), indent=2) + "\n"
