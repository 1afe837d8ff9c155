"""LLM architecture description and its per-layer operator list."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from .hwmodel import (
    FP16_BYTES,
    W4A16_GROUP,
    MatmulSpec,
    NpuParams,
    Phase,
    TensorShape,
    npu_matmul_latency,
    w4a16_bytes_per_element,
)

MODEL_SCHEMA = "hetsoc.model/1"


class ModelSpecError(ValueError):
    pass


class Precision(str, Enum):
    W4A16 = "W4A16"
    FP16 = "FP16"


class OpKind(str, Enum):
    QKV_PROJ = "QkvProj"
    O_PROJ = "OProj"
    FFN_UP = "FfnUp"
    FFN_GATE = "FfnGate"
    FFN_DOWN = "FfnDown"
    RMS_NORM = "RmsNorm"
    SWIGLU = "SwiGlu"
    ATTENTION_GLUE = "AttentionGlue"


MATMUL_KINDS = frozenset({OpKind.QKV_PROJ, OpKind.O_PROJ, OpKind.FFN_UP, OpKind.FFN_GATE, OpKind.FFN_DOWN})


class Affinity(str, Enum):
    GPU = "GPU"
    NPU = "NPU"
    EITHER = "Either"


def weight_element_bytes(precision: Precision) -> float:
    return w4a16_bytes_per_element() if Precision(precision) is Precision.W4A16 else FP16_BYTES


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    hidden_dim: int
    ffn_dim: int
    n_heads: int
    n_kv_heads: int
    vocab_size: int
    weight_precision: Precision = Precision.W4A16

    def __post_init__(self):
        for f in ("n_heads", "n_kv_heads", "hidden_dim", "ffn_dim", "vocab_size"):
            v = getattr(self, f)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ModelSpecError(f"{f} must be a positive integer")
        if not isinstance(self.n_layers, int) or isinstance(self.n_layers, bool) or self.n_layers < 0:
            raise ModelSpecError("n_layers must be a non-negative integer")
        if self.hidden_dim % self.n_heads:
            raise ModelSpecError("hidden_dim must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads:
            raise ModelSpecError("n_heads must be divisible by n_kv_heads")
        object.__setattr__(self, "weight_precision", Precision(self.weight_precision))

    @property
    def qkv_out(self) -> int:
        return self.hidden_dim + 2 * self.hidden_dim * self.n_kv_heads // self.n_heads


@dataclass(frozen=True)
class LayerOp:
    """One operator of a decoder block.

    ``weight_shape`` is ``[in_features, out_features]`` as used in
    ``x @ W``.  The partitionable row axis is the output-feature axis, so the
    profile/partition key is the transposed ``kernel_shape``.
    """

    kind: OpKind
    seq_len: int
    weight_shape: TensorShape | None
    weight_precision: Precision
    activation_dim: int

    @property
    def partitionable(self) -> bool:
        return self.kind in MATMUL_KINDS

    @property
    def affinity(self) -> Affinity:
        return Affinity.EITHER if self.partitionable else Affinity.GPU

    @property
    def kernel_shape(self) -> TensorShape:
        if self.weight_shape is None:
            raise ModelSpecError(f"{self.kind.value} has no weight")
        return self.weight_shape.transposed()

    @property
    def weight_bytes(self) -> float:
        if self.weight_shape is None:
            return 0.0
        return tensor_weight_bytes(self.weight_shape.element_count, self.weight_precision)

    @property
    def activation_bytes(self) -> float:
        return self.seq_len * self.activation_dim * FP16_BYTES

    def natural_matmul(self) -> MatmulSpec:
        """``x[S, in] @ W[in, out]`` with the weight stationary."""
        return MatmulSpec(
            TensorShape(self.seq_len, self.weight_shape.rows),
            self.weight_shape,
            element_bytes_a=FP16_BYTES,
            element_bytes_b=weight_element_bytes(self.weight_precision),
        )

    def matmul(self, npu: NpuParams | None = None) -> MatmulSpec:
        """The NPU-facing spec, order-exchanged when that is strictly faster."""
        npu = npu or NpuParams()
        spec = self.natural_matmul()
        swapped = spec.exchanged()
        if npu_matmul_latency(swapped, npu) < npu_matmul_latency(spec, npu):
            return swapped
        return spec

    @property
    def flops(self) -> int:
        return self.natural_matmul().flops if self.partitionable else 0


def tensor_weight_bytes(elements: int, precision: Precision) -> float:
    if Precision(precision) is Precision.FP16:
        return elements * FP16_BYTES
    return elements * 0.5 + math.ceil(elements / W4A16_GROUP) * FP16_BYTES


def ops_for_layer(spec: ModelSpec, phase: Phase, seq_len: int) -> list[LayerOp]:
    if Phase(phase) is Phase.DECODING:
        seq_len = 1
    if seq_len < 1:
        raise ModelSpecError("seq_len must be >= 1")
    h, f, p = spec.hidden_dim, spec.ffn_dim, spec.weight_precision

    def mm(kind, rows, cols):
        return LayerOp(kind, seq_len, TensorShape(rows, cols), p, rows)

    def glue(kind, dim):
        return LayerOp(kind, seq_len, None, p, dim)

    return [
        glue(OpKind.RMS_NORM, h),
        mm(OpKind.QKV_PROJ, h, spec.qkv_out),
        glue(OpKind.ATTENTION_GLUE, h),
        mm(OpKind.O_PROJ, h, h),
        glue(OpKind.RMS_NORM, h),
        mm(OpKind.FFN_UP, h, f),
        mm(OpKind.FFN_GATE, h, f),
        glue(OpKind.SWIGLU, f),
        mm(OpKind.FFN_DOWN, f, h),
    ]


def partitionable_shapes(spec: ModelSpec) -> list[TensorShape]:
    """Distinct kernel shapes of the partitionable ops, in layer order."""
    seen = []
    for op in ops_for_layer(spec, Phase.DECODING, 1):
        if op.partitionable and op.kernel_shape not in seen:
            seen.append(op.kernel_shape)
    return seen


def weight_bytes(spec: ModelSpec, include_embeddings: bool = False) -> float:
    per_layer = sum(op.weight_bytes for op in ops_for_layer(spec, Phase.DECODING, 1))
    total = per_layer * spec.n_layers
    if include_embeddings:
        # input embedding and LM head
        total += 2 * tensor_weight_bytes(spec.vocab_size * spec.hidden_dim, spec.weight_precision)
    return total


# ---------------------------------------------------------------------------
# JSON

_FIELDS = {
    "name": str,
    "n_layers": int,
    "hidden_dim": int,
    "ffn_dim": int,
    "n_heads": int,
    "n_kv_heads": int,
    "vocab_size": int,
    "weight_precision": str,
}


def model_to_json(spec: ModelSpec) -> dict:
    doc = {"schema": MODEL_SCHEMA}
    for name in _FIELDS:
        v = getattr(spec, name)
        doc[name] = v.value if isinstance(v, Enum) else v
    return doc


def model_from_json(doc: dict) -> ModelSpec:
    if not isinstance(doc, dict):
        raise ModelSpecError("model document must be a JSON object")
    if doc.get("schema") != MODEL_SCHEMA:
        raise ModelSpecError(f"schema: expected {MODEL_SCHEMA!r}, got {doc.get('schema')!r}")
    unknown = set(doc) - set(_FIELDS) - {"schema", "comment"}
    if unknown:
        raise ModelSpecError(f"unknown field(s): {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, typ in _FIELDS.items():
        if name not in doc:
            raise ModelSpecError(f"missing field: {name}")
        v = doc[name]
        if not isinstance(v, typ) or isinstance(v, bool):
            raise ModelSpecError(f"field {name} must be {typ.__name__}")
        kwargs[name] = v
    try:
        kwargs["weight_precision"] = Precision(kwargs["weight_precision"])
    except ValueError:
        raise ModelSpecError("field weight_precision must be W4A16 or FP16") from None
    return ModelSpec(**kwargs)


def load_model_spec(source: str | Path | dict) -> ModelSpec:
    """Parse a model from a dict, a JSON string, a path, or a shipped name
    such as ``"llama8b"``."""
    if isinstance(source, dict):
        return model_from_json(source)
    text = str(source)
    if text.lstrip().startswith("{"):
        return model_from_json(json.loads(text))
    path = Path(text)
    if not path.exists():
        shipped = resources.files("hetsoc.data").joinpath(f"{path.stem}.json")
        if shipped.is_file():
            return model_from_json(json.loads(shipped.read_text()))
        raise ModelSpecError(f"model file not found: {text}")
    return model_from_json(json.loads(path.read_text()))


def dump_model_spec(spec: ModelSpec) -> str:
    return json.dumps(model_to_json(spec), indent=2) + "\n"
