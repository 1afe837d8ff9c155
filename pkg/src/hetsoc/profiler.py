"""Operator latency tables over the constrained shape space.

Only LLM weight shapes are profiled, NPU activations are restricted to the
standard sequence lengths, and GPU rows are additionally profiled at length 1
for decoding.  Tables can be synthesized from the hardware model or imported
from CSV measurements.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

from .hwmodel import (
    FP16_BYTES,
    Device,
    HardwareConfig,
    MatmulSpec,
    TensorShape,
    gpu_matmul_latency,
    npu_matmul_latency,
)
from .modelspec import Precision, weight_element_bytes

DEFAULT_STANDARD_LENGTHS = (32, 64, 128, 256, 512, 1024)
DEFAULT_NPU_MIN_SUBTENSOR = 32

CSV_COLUMNS = (
    "device",
    "weight_rows",
    "weight_cols",
    "activation_len",
    "latency_us",
    "bandwidth_bytes_per_s",
    "source",
)


class ProfileError(ValueError):
    pass


class MissingProfileError(ProfileError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else "missing profile entry"


class NeedsDecompositionError(ProfileError):
    """The NPU has no static graph large enough for this sequence length."""


class Source(str, Enum):
    SYNTHETIC = "Synthetic"
    IMPORTED = "Imported"


@dataclass(frozen=True)
class ProfileKey:
    device: Device
    weight_shape: TensorShape
    activation_len: int

    def __post_init__(self):
        object.__setattr__(self, "device", Device(self.device))
        if self.device is Device.CPU:
            raise ProfileError("only GPU and NPU are profiled")
        if not isinstance(self.activation_len, int) or self.activation_len < 1:
            raise ProfileError(f"activation_len must be >= 1, got {self.activation_len!r}")


@dataclass(frozen=True)
class ProfileEntry:
    key: ProfileKey
    latency: float
    bandwidth_observed: float | None = None
    source: Source = Source.SYNTHETIC

    def __post_init__(self):
        if not self.latency > 0:
            raise ProfileError(f"latency must be > 0 for {self.key}")
        object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class ProfileTable:
    entries: Mapping[ProfileKey, ProfileEntry]
    standard_lengths: tuple[int, ...]
    npu_min_subtensor: int = DEFAULT_NPU_MIN_SUBTENSOR
    _knots: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        lengths = tuple(sorted(set(self.standard_lengths)))
        object.__setattr__(self, "standard_lengths", lengths)
        for key, entry in self.entries.items():
            if entry.key != key:
                raise ProfileError(f"entry stored under mismatched key {key}")
            if key.device is Device.NPU and key.activation_len not in lengths:
                raise ProfileError(f"NPU entry at non-standard length {key.activation_len}")
        knots: dict[tuple[Device, TensorShape], list[tuple[int, float]]] = {}
        for key, entry in self.entries.items():
            knots.setdefault((key.device, key.weight_shape), []).append((key.activation_len, entry.latency))
        for pts in knots.values():
            pts.sort()
        object.__setattr__(self, "_knots", knots)

    @classmethod
    def from_entries(
        cls,
        entries: Iterable[ProfileEntry],
        standard_lengths: Iterable[int] | None = None,
        npu_min_subtensor: int = DEFAULT_NPU_MIN_SUBTENSOR,
    ) -> ProfileTable:
        table: dict[ProfileKey, ProfileEntry] = {}
        for e in entries:
            if e.key in table:
                raise ProfileError(f"duplicate profile key {e.key}")
            table[e.key] = e
        if standard_lengths is None:
            standard_lengths = {k.activation_len for k in table if k.device is Device.NPU}
        return cls(table, tuple(standard_lengths), npu_min_subtensor)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, device: Device, shape: TensorShape, length: int) -> ProfileEntry:
        try:
            return self.entries[ProfileKey(device, shape, length)]
        except KeyError:
            raise MissingProfileError(f"no {Device(device).value} profile for {shape} at length {length}") from None

    def lengths_for(self, device: Device, shape: TensorShape) -> list[int]:
        return [n for n, _ in self._knots.get((Device(device), shape), [])]

    def prefill_lengths(self, shape: TensorShape) -> list[int]:
        """NPU static-graph lengths usable for prefill segments (length 1 is decode-only)."""
        return [n for n in self.lengths_for(Device.NPU, shape) if n > 1]

    def shapes(self) -> list[TensorShape]:
        out = []
        for key in self.entries:
            if key.weight_shape not in out:
                out.append(key.weight_shape)
        return out


# ---------------------------------------------------------------------------
# Synthetic build


def kernel_matmul(shape: TensorShape, length: int, precision: Precision = Precision.W4A16) -> MatmulSpec:
    """Weight ``[out, in]`` streamed against activation ``[in, length]``."""
    return MatmulSpec(
        shape,
        TensorShape(shape.cols, length),
        element_bytes_a=weight_element_bytes(precision),
        element_bytes_b=FP16_BYTES,
    )


def synthetic_latency(hw: HardwareConfig, device: Device, shape: TensorShape, length: int,
                      precision: Precision = Precision.W4A16) -> tuple[float, float]:
    """(latency_us, bytes moved) for one profiled point from the analytic model."""
    spec = kernel_matmul(shape, length, precision)
    if Device(device) is Device.GPU:
        return gpu_matmul_latency(spec, hw.gpu), spec.total_bytes
    # NPU runs whichever operand order is cheaper
    lat = min(npu_matmul_latency(spec, hw.npu), npu_matmul_latency(spec.exchanged(), hw.npu))
    return lat, spec.total_bytes


def build_profile(
    hw: HardwareConfig,
    weight_shapes: list[TensorShape],
    standard_lengths: Iterable[int] = DEFAULT_STANDARD_LENGTHS,
    npu_min_subtensor: int = DEFAULT_NPU_MIN_SUBTENSOR,
    precision: Precision = Precision.W4A16,
) -> ProfileTable:
    weight_shapes = list(weight_shapes)
    lengths = list(standard_lengths)
    if not weight_shapes or not lengths:
        raise ProfileError("build_profile needs at least one weight shape and one standard length")
    if lengths != sorted(lengths) or lengths[0] < 1:
        raise ProfileError("standard lengths must be ascending and >= 1")
    if npu_min_subtensor < hw.npu.array_dim:
        raise ProfileError("npu_min_subtensor must be at least one systolic tile")
    # decoding always has a fixed-shape graph
    lengths = sorted(set(lengths) | {1})
    entries = []
    for device in (Device.GPU, Device.NPU):
        for shape in weight_shapes:
            if device is Device.NPU and shape.rows < npu_min_subtensor:
                continue
            for n in lengths:
                lat, nbytes = synthetic_latency(hw, device, shape, n, precision)
                entries.append(ProfileEntry(ProfileKey(device, shape, n), lat, nbytes / (lat * 1e-6)))
    return ProfileTable.from_entries(entries, lengths, npu_min_subtensor)


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def save_csv(table: ProfileTable) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for e in table.entries.values():
        k = e.key
        w.writerow([k.device.value, k.weight_shape.rows, k.weight_shape.cols, k.activation_len,
                    _fmt(e.latency), _fmt(e.bandwidth_observed), e.source.value])
    return buf.getvalue().encode("utf-8")


def _parse_row(row: list[str]) -> ProfileEntry:
    if len(row) != len(CSV_COLUMNS):
        raise ValueError(f"expected {len(CSV_COLUMNS)} columns, got {len(row)}")
    device, rows, cols, length, lat, bw, source = (c.strip() for c in row)
    try:
        dev = Device(device)
    except ValueError:
        raise ValueError(f"unknown device {device!r}") from None
    try:
        src = Source(source)
    except ValueError:
        raise ValueError(f"unknown source {source!r}") from None
    key = ProfileKey(dev, TensorShape(int(rows), int(cols)), int(length))
    return ProfileEntry(key, float(lat), float(bw) if bw else None, src)


def load_csv(data: bytes | str, npu_min_subtensor: int = DEFAULT_NPU_MIN_SUBTENSOR) -> ProfileTable:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
        raise ProfileError(f"line 1: header must be exactly {','.join(CSV_COLUMNS)}")
    entries = []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        try:
            entry = _parse_row(row)
        except (ValueError, OverflowError) as exc:
            raise ProfileError(f"line {line}: {exc}") from None
        if entry.key in seen:
            raise ProfileError(f"line {line}: duplicate key {entry.key}")
        seen.add(entry.key)
        entries.append(entry)
    return ProfileTable.from_entries(entries, None, npu_min_subtensor)


# ---------------------------------------------------------------------------
# Estimation


def estimate_latency(table: ProfileTable, device: Device, weight_shape: TensorShape, seq_len: int) -> float:
    """Latency for an arbitrary sequence length.

    GPU: piecewise-linear through the profiled points, continuing the end
    segments' slopes outside the profiled range.  NPU: the value of the
    smallest profiled static length that fits ``seq_len``.
    """
    device = Device(device)
    if seq_len < 1:
        raise ProfileError("seq_len must be >= 1")
    pts = table._knots.get((device, weight_shape))
    if not pts:
        raise MissingProfileError(f"no {device.value} profile for {weight_shape} at length {seq_len}")
    xs = [p[0] for p in pts]
    i = bisect.bisect_left(xs, seq_len)
    if device is Device.NPU:
        if i == len(xs):
            raise NeedsDecompositionError(
                f"NPU has no static graph for length {seq_len} of {weight_shape} "
                f"(max {xs[-1]}); requires decomposition or padding"
            )
        return pts[i][1]
    if i < len(xs) and xs[i] == seq_len:
        return pts[i][1]
    if len(pts) == 1:
        return pts[0][1] * seq_len / xs[0]
    if i == 0:
        (x0, y0), (x1, y1) = pts[0], pts[1]
    elif i == len(xs):
        (x0, y0), (x1, y1) = pts[-2], pts[-1]
    else:
        (x0, y0), (x1, y1) = pts[i - 1], pts[i]
    return max(0.0, y0 + (y1 - y0) * (seq_len - x0) / (x1 - x0))
