"""``hetsoc`` command line: profile, solve, simulate, compare, explain.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .hwmodel import HardwareConfig, HardwareError, Phase, load_hardware
from .modelspec import ModelSpec, ModelSpecError, load_model_spec, partitionable_shapes
from .planner import Mode, PlanError, dump_plan, plan_from_json, solve_model, strategy_to_json
from .profiler import DEFAULT_STANDARD_LENGTHS, ProfileError, ProfileTable, build_profile, load_csv, save_csv
from .simengine import SimError, compare_modes, export_timeline, simulate, summary_to_json


class OutputFormat(str, Enum):
    TABLE = "table"
    JSON = "json"
    CSV = "csv"


@dataclass(frozen=True)
class CliConfig:
    hardware_path: Path | None
    model_path: str
    profile_path: Path | None
    output_format: OutputFormat = OutputFormat.TABLE
    out: Path | None = None

    def validate(self):
        for p in (self.hardware_path, self.profile_path):
            if p is not None and not p.is_file():
                raise FileNotFoundError(f"no such file: {p}")

    def hardware(self) -> HardwareConfig:
        return load_hardware(self.hardware_path)

    def model(self) -> ModelSpec:
        return load_model_spec(self.model_path)

    def profile(self, hw: HardwareConfig, model: ModelSpec) -> ProfileTable:
        if self.profile_path is not None:
            return load_csv(self.profile_path.read_bytes())
        return build_profile(hw, partitionable_shapes(model))


class UsageError(Exception):
    pass


RUNTIME_ERRORS = (ProfileError, PlanError, SimError, ModelSpecError, HardwareError, OSError, KeyError, ValueError)


# --------------------------------------------------------------------------
# Formatting


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def render_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


def render(fmt: OutputFormat, header, rows, doc) -> str:
    if fmt is OutputFormat.JSON:
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt is OutputFormat.CSV:
        return render_csv(header, rows)
    return render_table(header, rows)


def _emit(text: str | bytes, out: Path | None):
    if out is None:
        sys.stdout.write(text.decode("utf-8") if isinstance(text, bytes) else text)
        return
    data = text.encode("utf-8") if isinstance(text, str) else text
    out.write_bytes(data)


def parse_lengths(text: str) -> list[int]:
    """``"32,64"``, ``"257..384"`` or a mix of both."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if ".." in part:
                lo, hi = (int(x) for x in part.split(".."))
                if hi < lo:
                    raise UsageError(f"empty range {part!r}")
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad length {part!r}") from None
    if not out:
        raise UsageError("length list is empty")
    if min(out) < 1:
        raise UsageError("lengths must be >= 1")
    return out


def parse_modes(text: str) -> list[Mode]:
    modes = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            modes.append(Mode(part))
        except ValueError:
            raise UsageError(f"unknown mode {part!r}; choose from {', '.join(m.value for m in Mode)}") from None
    if not modes:
        raise UsageError("mode list is empty")
    return modes


# --------------------------------------------------------------------------
# Commands


def cmd_profile(cfg: CliConfig, args) -> int:
    lengths = parse_lengths(args.lengths)
    if lengths != sorted(set(lengths)):
        raise UsageError("lengths must be strictly ascending")
    hw, model = cfg.hardware(), cfg.model()
    t0 = time.perf_counter()
    table = build_profile(hw, partitionable_shapes(model), lengths)
    elapsed = time.perf_counter() - t0
    data = save_csv(table)
    if cfg.out is not None:
        cfg.out.write_bytes(data)
        sys.stdout.write(f"{len(table)} entries\n")
    else:
        sys.stdout.write(data.decode("utf-8"))
    # wall time varies run to run, so it stays off stdout
    sys.stderr.write(f"built {len(table)} entries in {elapsed * 1e3:.1f} ms\n")
    return 0


def _solve(cfg: CliConfig, args):
    hw, model = cfg.hardware(), cfg.model()
    table = cfg.profile(hw, model)
    plan = solve_model(model, Phase(args.phase), args.seq_len, table, hw, Mode(args.mode))
    return hw, model, table, plan


def _explain_rows(plan):
    rows = []
    for op_plan in plan.layers[0] if plan.layers else ():
        op = op_plan.op
        shape = f"({op.kernel_shape.rows},{op.kernel_shape.cols})" if op.partitionable else "-"
        for ev in op_plan.alternatives:
            detail = strategy_to_json(ev.strategy)
            detail.pop("tag")
            rows.append([
                op.kind.value, shape, op.seq_len, ev.strategy.tag,
                json.dumps(detail, sort_keys=True) if detail else "",
                ev.t_gpu, ev.t_npu, ev.t_sync, ev.t_total,
                "*" if ev == op_plan.chosen else "",
            ])
    return rows


EXPLAIN_HEADER = ["op", "weight", "act_len", "strategy", "params", "t_gpu_us", "t_npu_us", "t_sync_us", "t_total_us", "chosen"]


def cmd_explain(cfg: CliConfig, args) -> int:
    _, _, _, plan = _solve(cfg, args)
    rows = _explain_rows(plan)
    doc = [dict(zip(EXPLAIN_HEADER, r)) for r in rows]
    _emit(render(cfg.output_format, EXPLAIN_HEADER, rows, doc), cfg.out)
    return 0


def cmd_solve(cfg: CliConfig, args) -> int:
    _, _, _, plan = _solve(cfg, args)
    if args.explain:
        sys.stdout.write(render_table(EXPLAIN_HEADER, _explain_rows(plan)))
    if cfg.output_format is OutputFormat.JSON or cfg.out is not None:
        _emit(dump_plan(plan), cfg.out)
        return 0
    header = ["op", "weight", "strategy", "params", "t_gpu_us", "t_npu_us", "t_sync_us", "t_total_us"]
    rows = []
    for op_plan in plan.layers[0] if plan.layers else ():
        op, ev = op_plan.op, op_plan.chosen
        detail = strategy_to_json(ev.strategy)
        detail.pop("tag")
        shape = f"({op.kernel_shape.rows},{op.kernel_shape.cols})" if op.partitionable else "-"
        rows.append([op.kind.value, shape, ev.strategy.tag, json.dumps(detail, sort_keys=True) if detail else "",
                     ev.t_gpu, ev.t_npu, ev.t_sync, ev.t_total])
    _emit(render(cfg.output_format, header, rows, None), None)
    return 0


def cmd_simulate(cfg: CliConfig, args) -> int:
    hw, model = cfg.hardware(), cfg.model()
    if args.plan:
        plan = plan_from_json(json.loads(Path(args.plan).read_text()))
        decode_plan = None
        if plan.phase is Phase.PREFILL and args.tokens:
            decode_plan = solve_model(model, Phase.DECODING, 1, cfg.profile(hw, model), hw, plan.mode)
    else:
        table = cfg.profile(hw, model)
        mode = Mode(args.mode)
        if args.seq_len:
            plan = solve_model(model, Phase.PREFILL, args.seq_len, table, hw, mode)
            decode_plan = solve_model(model, Phase.DECODING, 1, table, hw, mode) if args.tokens else None
        else:
            if not args.tokens:
                raise UsageError("simulate needs --seq-len, --tokens or both")
            plan, decode_plan = solve_model(model, Phase.DECODING, 1, table, hw, mode), None
    n_tokens = args.tokens
    result = simulate(plan, model, hw, n_tokens, decode_plan)
    summary = summary_to_json(result)
    if args.timeline:
        Path(args.timeline).write_bytes(export_timeline(result))
    if cfg.output_format is OutputFormat.JSON or cfg.out is not None:
        _emit(json.dumps(summary, indent=2, sort_keys=True) + "\n", cfg.out)
        return 0
    end = result.end_time or 1.0
    rows = [
        ["prefill_latency_us", result.prefill_latency],
        ["decode_latency_per_token_us", result.decode_latency_per_token],
        ["tokens_per_second", result.tokens_per_second],
        ["achieved_bandwidth_GB_per_s", None if result.achieved_bandwidth is None else result.achieved_bandwidth / 1e9],
        ["sync_overhead_total_us", result.sync_overhead_total],
        ["graph_gen_total_us", result.graph_gen_total],
    ] + [[f"utilization_{d.value}", busy / end] for d, busy in summary_items(result)]
    _emit(render(cfg.output_format, ["metric", "value"], rows, None), None)
    return 0


def summary_items(result):
    return sorted(result.busy_time.items(), key=lambda kv: ["CPU", "GPU", "NPU"].index(kv[0].value))


def cmd_compare(cfg: CliConfig, args) -> int:
    lengths = parse_lengths(args.seq_lens)
    modes = parse_modes(args.modes)
    hw, model = cfg.hardware(), cfg.model()
    table = cfg.profile(hw, model)
    phase = Phase(args.phase)
    if phase is Phase.DECODING:
        lengths = [1]
    header = ["seq_len"] + [f"{m.value}_us" for m in modes]
    rows = []
    for n in lengths:
        cells = compare_modes(model, hw, phase, n, modes, table, n_decode_tokens=args.tokens)
        rows.append([n] + [c.latency for c in cells])
    fmt = cfg.output_format if args.format_given else OutputFormat.CSV
    doc = [dict(zip(header, r)) for r in rows]
    _emit(render(fmt, header, rows, doc), cfg.out)
    return 0


# --------------------------------------------------------------------------
# Parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--hardware", metavar="PATH", default=d, help="hardware JSON (default: shipped calibration)")
    p.add_argument("--model", metavar="PATH", default=d, help="model JSON or shipped name (default: llama8b)")
    p.add_argument("--profile", metavar="PATH", default=d, help="profile CSV (default: synthesized from hardware)")
    p.add_argument("--format", choices=[f.value for f in OutputFormat], default=d)
    p.add_argument("--out", metavar="PATH", default=d, help="write the primary output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetsoc", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [m.value for m in Mode]

    p = sub.add_parser("profile", help="synthesize a profile table as CSV")
    _global_flags(p, suppress=True)
    p.add_argument("--lengths", default=",".join(map(str, DEFAULT_STANDARD_LENGTHS)),
                   help="standard sequence lengths, e.g. 32,64,128 (length 1 is always added)")
    p.set_defaults(func=cmd_profile)

    for name, func, help_ in (("solve", cmd_solve, "solve an execution plan"),
                              ("explain", cmd_explain, "list every candidate the solver weighed")):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        p.add_argument("--phase", choices=[x.value for x in Phase], default=Phase.PREFILL.value)
        p.add_argument("--seq-len", type=int, default=256)
        p.add_argument("--mode", choices=modes, default=Mode.HETERO_TENSOR.value)
        if name == "solve":
            p.add_argument("--explain", action="store_true", help="also print the candidate table")
        p.set_defaults(func=func)

    p = sub.add_parser("simulate", help="simulate a plan or a mode")
    _global_flags(p, suppress=True)
    p.add_argument("--plan", metavar="PATH", help="plan JSON from 'solve'")
    p.add_argument("--mode", choices=modes, default=Mode.HETERO_TENSOR.value)
    p.add_argument("--seq-len", type=int, default=0, help="prompt length (0: decoding only)")
    p.add_argument("--tokens", type=int, default=0, help="decoding tokens to generate")
    p.add_argument("--timeline", metavar="PATH", help="write the event timeline as NDJSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="latency per (seq_len, mode) as CSV")
    _global_flags(p, suppress=True)
    p.add_argument("--phase", choices=[x.value for x in Phase], default=Phase.PREFILL.value)
    p.add_argument("--seq-lens", default="256", help="e.g. 257..384 or 128,256")
    p.add_argument("--modes", default="PaddingBaseline,HeteroTensor")
    p.add_argument("--tokens", type=int, default=1, help="decoding tokens per cell")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("seq_len", "tokens"):
        if getattr(args, name, 0) < 0:
            parser.error(f"--{name.replace('_', '-')} must be >= 0")
    if args.command in ("solve", "explain") and args.seq_len < 1:
        parser.error("--seq-len must be >= 1")
    args.format_given = args.format is not None
    cfg = CliConfig(
        hardware_path=Path(args.hardware) if args.hardware else None,
        model_path=args.model or "llama8b",
        profile_path=Path(args.profile) if args.profile else None,
        output_format=OutputFormat(args.format or "table"),
        out=Path(args.out) if args.out else None,
    )
    try:
        cfg.validate()
        return args.func(cfg, args)
    except UsageError as exc:
        parser.error(str(exc))
    except RUNTIME_ERRORS as exc:
        sys.stderr.write(f"hetsoc: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
