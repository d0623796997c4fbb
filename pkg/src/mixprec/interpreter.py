"""Reference interpreter with per-node precision emulation and profiling.

Execution walks the graph in topological order carrying every tensor as
float64.  At each compute node the operands are rounded to the node's
assigned format, the operation itself is evaluated in double width, and
the result is rounded back to the node's format.  Reductions and
contractions round every elementary product to the node format and
every running partial sum to the accumulation format (fp32 when the
node format is tf32, else the node format itself), walking the reduced
axis sequentially in index order so results are bit-deterministic.

Contractions run in one of two modes:

* ``fused_contraction`` accumulates directly into the output and never
  allocates the broadcast product.
* ``materialize_then_reduce`` first allocates the full product tensor
  (output extents times contracted extents) and then reduces it, in the
  same order, so the two modes agree numerically while their peak live
  memory differs by exactly the intermediate's bytes.

The profiler counts a tensor's bytes from production until its last
consumer has executed and reports the running peak plus a
memory-over-time trace.  A deterministic modeled cost accompanies the
wall clock: per-node scalar work (output elements times the reduction
depth, i.e. multiply-accumulate count for contractions) weighted per
format, plus cast traffic weighted per byte.  ``execute`` is reentrant;
``measure`` serializes wall-clock runs behind a module lock so timings
are not polluted by sibling threads.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.special as sc

from .formats import FORMATS, FP32, FP64, TF32, PrecisionFormat, bytes_of, round_to_format
from .graph import Graph, Node, PrecisionConfig, contraction_spec

__all__ = [
    "InterpreterError",
    "CostModel",
    "DEFAULT_COST_MODEL",
    "ExecutionProfile",
    "MeasureResult",
    "execute",
    "measure",
    "modeled_cost_of",
    "node_work",
    "accumulation_format",
    "MODES",
]

MODES = ("fused_contraction", "materialize_then_reduce")

_MEASURE_LOCK = threading.Lock()


class InterpreterError(RuntimeError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Deterministic stand-in for device latency.

    ``weights`` maps format name to cost per scalar operation;
    ``cast_weight`` is the cost per byte moved through a format cast.
    Narrower formats must not cost more than wider ones.
    """

    weights: Mapping[str, float] = field(
        default_factory=lambda: {"fp64": 4.0, "fp32": 2.0, "tf32": 1.5, "fp16": 1.0}
    )
    cast_weight: float = 0.5

    def __post_init__(self):
        w = self.weights
        for name in ("fp64", "fp32", "tf32", "fp16"):
            if name not in w or w[name] <= 0:
                raise ValueError(f"cost model needs a positive weight for {name}")
        if not (w["fp64"] > w["fp32"] >= w["tf32"] >= w["fp16"]):
            raise ValueError("cost weights must not increase as formats narrow")
        if self.cast_weight <= 0:
            raise ValueError("cast_weight must be positive")


DEFAULT_COST_MODEL = CostModel()


def accumulation_format(fmt: PrecisionFormat) -> PrecisionFormat:
    """Partial sums accumulate in fp32 for tf32 nodes, else in the node format."""
    return FP32 if fmt.name == TF32.name else fmt


def node_work(node: Node, graph: Graph) -> int:
    """Scalar operations attributed to one node.

    Elementwise and data-movement nodes count their output elements;
    reductions count every accumulated element; contractions count
    multiply-accumulates (output elements times contracted extent).
    """
    out_elems = int(np.prod(node.out_shape, dtype=np.int64)) if node.out_shape else 1
    if node.is_source:
        return 0
    if node.kind in ("reduce_sum", "reduce_max"):
        in_shape = graph.node(node.operands[0]).out_shape
        return int(np.prod(in_shape, dtype=np.int64)) if in_shape else 1
    if node.kind == "contraction":
        spec = _node_contraction_spec(node, graph)
        return out_elems * spec["contract_elems"]
    return out_elems


def _node_contraction_spec(node: Node, graph: Graph):
    return contraction_spec(
        graph.node(node.operands[0]).out_shape,
        graph.node(node.operands[1]).out_shape,
        (node.param("contract_lhs"), node.param("contract_rhs")),
        (node.param("batch_lhs"), node.param("batch_rhs")),
    )


@dataclass
class ExecutionProfile:
    mode: str
    peak_live_bytes: int = 0
    cast_count: int = 0
    cast_bytes: int = 0
    output_finite: bool = True
    wall_seconds: float = 0.0
    per_node_elapsed: dict[int, float] = field(default_factory=dict)
    per_node_modeled_cost: dict[int, float] = field(default_factory=dict)
    per_node_bytes: dict[int, int] = field(default_factory=dict)
    memory_trace: list[tuple[float, int, str, int]] = field(default_factory=list)

    @property
    def modeled_cost(self) -> float:
        return float(sum(self.per_node_modeled_cost.values()))

    def report_lines(self, graph: Graph, config: PrecisionConfig) -> list[str]:
        lines = [
            f"graph {graph.name} mode={self.mode} peak_live_bytes={self.peak_live_bytes} "
            f"casts={self.cast_count} cast_bytes={self.cast_bytes} "
            f"modeled_cost={self.modeled_cost:.3f} wall={self.wall_seconds:.6f}s"
        ]
        for n in graph.nodes:
            if n.is_source or n.kind == "cast":
                fmt = n.fmt
            else:
                fmt = config.fmt(n.nid).name
            lines.append(
                f"  node {n.nid:>3} {n.kind:<11} {(n.op or n.name or ''):<12} fmt={fmt:<5} "
                f"bytes={self.per_node_bytes.get(n.nid, 0):>10} "
                f"cost={self.per_node_modeled_cost.get(n.nid, 0.0):>12.2f} "
                f"wall={self.per_node_elapsed.get(n.nid, 0.0):.6f}s"
            )
        return lines

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "peak_live_bytes": self.peak_live_bytes,
            "cast_count": self.cast_count,
            "cast_bytes": self.cast_bytes,
            "output_finite": self.output_finite,
            "wall_seconds": self.wall_seconds,
            "modeled_cost": self.modeled_cost,
            "per_node_elapsed": {str(k): v for k, v in self.per_node_elapsed.items()},
            "per_node_modeled_cost": {
                str(k): v for k, v in self.per_node_modeled_cost.items()
            },
            "memory_trace": [
                {"t": t, "node": n, "event": e, "live_bytes": b}
                for t, n, e, b in self.memory_trace
            ],
        }


def _unary_value(op: str, x: np.ndarray) -> np.ndarray:
    if op == "neg":
        return -x
    if op == "exp":
        return np.exp(x)
    if op == "log":
        return np.log(x)
    if op == "sqrt":
        return np.sqrt(x)
    if op == "digamma":
        return sc.digamma(x)
    if op == "lgamma":
        return sc.gammaln(x)
    if op == "reciprocal":
        return np.divide(1.0, x)
    raise InterpreterError(f"unknown unary op {op!r}")


def _binary_value(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if op == "add":
        return np.add(a, b)
    if op == "sub":
        return np.subtract(a, b)
    if op == "mul":
        return np.multiply(a, b)
    if op == "div":
        return np.divide(a, b)
    if op == "max":
        return np.maximum(a, b)
    raise InterpreterError(f"unknown binary op {op!r}")


def _reduce(arr: np.ndarray, axes: tuple[int, ...], kind: str, fmt, acc_fmt):
    """Sequential reduction in index order with partial-sum rounding."""
    kept = tuple(i for i in range(arr.ndim) if i not in axes)
    kept_shape = tuple(arr.shape[i] for i in kept)
    count = int(np.prod([arr.shape[i] for i in axes], dtype=np.int64))
    a = arr.transpose(kept + tuple(axes)).reshape(kept_shape + (count,))
    if kind == "reduce_sum":
        acc = np.zeros(kept_shape, dtype=np.float64)
        for c in range(count):
            acc = round_to_format(acc + a[..., c], acc_fmt)
    else:
        acc = a[..., 0].copy()
        for c in range(1, count):
            acc = round_to_format(np.maximum(acc, a[..., c]), acc_fmt)
    return acc


def _contract(lhs, rhs, node: Node, graph: Graph, fmt, acc_fmt, materialize: bool):
    """Two-operand contraction over flattened (batch, free, contract) layout."""
    spec = _node_contraction_spec(node, graph)
    bt, fl, fr, cn = (
        spec["batch_elems"],
        spec["lfree_elems"],
        spec["rfree_elems"],
        spec["contract_elems"],
    )
    l3 = lhs.transpose(spec["lhs_perm"]).reshape(bt, fl, cn)
    r3 = rhs.transpose(spec["rhs_perm"]).reshape(bt, fr, cn)
    acc = np.zeros((bt, fl, fr), dtype=np.float64)
    if materialize:
        # Full broadcast product held live while the reduction runs.
        full = round_to_format(l3[:, :, None, :] * r3[:, None, :, :], fmt)
        for c in range(cn):
            acc = round_to_format(acc + full[..., c], acc_fmt)
    else:
        for c in range(cn):
            term = round_to_format(l3[:, :, c][:, :, None] * r3[:, :, c][:, None, :], fmt)
            acc = round_to_format(acc + term, acc_fmt)
    return acc.reshape(node.out_shape)


def execute(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    config: PrecisionConfig,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
) -> tuple[list[np.ndarray], ExecutionProfile]:
    """Run the graph and return (outputs, profile).

    Outputs follow ``graph.outputs`` order and are float64 arrays whose
    values sit on the producing node's format grid.  Non-finite outputs
    are returned but flagged on the profile; narrow-format runs produce
    them legitimately.  Bit-deterministic for fixed arguments.
    """
    if mode not in MODES:
        raise InterpreterError(f"mode must be one of {MODES}, got {mode!r}")
    config.for_graph(graph)

    t0 = time.perf_counter()
    profile = ExecutionProfile(mode=mode)
    values: dict[int, np.ndarray] = {}
    held_bytes: dict[int, int] = {}
    live = 0
    n_nodes = len(graph.nodes)

    def note(nid: int, event: str):
        profile.memory_trace.append((time.perf_counter() - t0, nid, event, live))

    last_use = {}
    for n in graph.nodes:
        last_use[n.nid] = max(graph.consumers[n.nid], default=-1)
    for o in graph.outputs:
        last_use[o] = n_nodes  # outputs survive the whole run

    # Cast nodes carry their own target format; everything else compute
    # takes it from the config.
    fmt_of: dict[int, str] = {}
    for n in graph.nodes:
        if n.is_source or n.kind == "cast":
            fmt_of[n.nid] = n.fmt
        else:
            fmt_of[n.nid] = config.fmt(n.nid).name

    # Sources are all resident before the first compute node runs.
    for n in graph.nodes:
        if n.kind == "input":
            if n.name not in inputs:
                raise InterpreterError(f"missing input {n.name!r}")
            arr = np.asarray(inputs[n.name], dtype=np.float64)
            if tuple(arr.shape) != n.out_shape:
                raise InterpreterError(
                    f"input {n.name!r} has shape {tuple(arr.shape)}, declared {n.out_shape}"
                )
            values[n.nid] = arr
        elif n.kind == "constant":
            values[n.nid] = n.value
        else:
            continue
        b = bytes_of(n.out_shape, FORMATS[n.fmt])
        held_bytes[n.nid] = b
        profile.per_node_bytes[n.nid] = b
        live += b
        note(n.nid, "alloc")
    peak = live

    cast_cache: dict[tuple[int, str], np.ndarray] = {}

    with np.errstate(all="ignore"):
        for n in graph.nodes:
            if n.is_source:
                if last_use[n.nid] < 0:  # unused input: freed immediately
                    live -= held_bytes.pop(n.nid, 0)
                    note(n.nid, "free")
                continue
            t_node = time.perf_counter()
            fmt = FORMATS[fmt_of[n.nid]]
            acc_fmt = accumulation_format(fmt)
            node_cast_bytes = 0

            ops = []
            for oid in n.operands:
                key = (oid, fmt.name)
                if key not in cast_cache:
                    cast_cache[key] = np.asarray(round_to_format(values[oid], fmt))
                    if fmt_of[oid] != fmt.name:
                        profile.cast_count += 1
                        b = bytes_of(graph.node(oid).out_shape, fmt)
                        profile.cast_bytes += b
                        node_cast_bytes += b
                ops.append(cast_cache[key])

            inter_bytes = 0
            if n.kind == "unary":
                result = round_to_format(_unary_value(n.op, ops[0]), fmt)
            elif n.kind == "binary":
                result = round_to_format(_binary_value(n.op, ops[0], ops[1]), fmt)
            elif n.kind in ("reduce_sum", "reduce_max"):
                result = _reduce(ops[0], n.param("axes"), n.kind, fmt, acc_fmt)
            elif n.kind == "contraction":
                materialize = mode == "materialize_then_reduce"
                if materialize:
                    inter_bytes = bytes_of(
                        n.out_shape + (_node_contraction_spec(n, graph)["contract_elems"],),
                        fmt,
                    )
                    live += inter_bytes
                    note(n.nid, "alloc_intermediate")
                result = _contract(ops[0], ops[1], n, graph, fmt, acc_fmt, materialize)
            elif n.kind == "transpose":
                result = np.ascontiguousarray(ops[0].transpose(n.param("perm")))
            elif n.kind == "reshape":
                result = ops[0].reshape(n.param("shape")).copy()
            elif n.kind == "cast":
                result = np.asarray(round_to_format(ops[0], fmt))
            else:
                raise InterpreterError(f"unknown node kind {n.kind!r}")

            result = np.asarray(result, dtype=np.float64)
            values[n.nid] = result
            b = bytes_of(n.out_shape, fmt)
            held_bytes[n.nid] = b
            profile.per_node_bytes[n.nid] = b
            live += b
            note(n.nid, "alloc")
            peak = max(peak, live)
            if inter_bytes:
                live -= inter_bytes
                note(n.nid, "free_intermediate")

            # Free operands this node consumed last.
            for oid in set(n.operands):
                if last_use[oid] == n.nid and oid in held_bytes:
                    live -= held_bytes.pop(oid)
                    note(oid, "free")

            profile.per_node_elapsed[n.nid] = time.perf_counter() - t_node
            profile.per_node_modeled_cost[n.nid] = (
                node_work(n, graph) * cost_model.weights[fmt.name]
                + node_cast_bytes * cost_model.cast_weight
            )

    outputs = [values[o] for o in graph.outputs]
    profile.output_finite = all(bool(np.isfinite(o).all()) for o in outputs)
    profile.peak_live_bytes = peak
    profile.wall_seconds = time.perf_counter() - t0
    return outputs, profile


def modeled_cost_of(
    graph: Graph, config: PrecisionConfig, cost_model: CostModel = DEFAULT_COST_MODEL
) -> float:
    """Modeled cost without executing; agrees exactly with execute()."""
    config.for_graph(graph)
    fmt_of = {
        n.nid: (
            n.fmt if (n.is_source or n.kind == "cast") else config.fmt(n.nid).name
        )
        for n in graph.nodes
    }
    total = 0.0
    seen: set[tuple[int, str]] = set()
    for n in graph.nodes:
        if n.is_source:
            continue
        fname = fmt_of[n.nid]
        total += node_work(n, graph) * cost_model.weights[fname]
        for oid in n.operands:
            key = (oid, fname)
            if key in seen:
                continue
            seen.add(key)
            if fmt_of[oid] != fname:
                total += bytes_of(graph.node(oid).out_shape, FORMATS[fname]) * cost_model.cast_weight
    return float(total)


@dataclass(frozen=True)
class MeasureResult:
    wall_seconds: float
    modeled_cost: float


def measure(
    graph: Graph,
    inputs: Mapping[str, np.ndarray],
    config: PrecisionConfig,
    repetitions: int = 5,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
) -> MeasureResult:
    """Median wall-clock over repeated runs plus the deterministic modeled cost.

    Wall-clock runs are serialized behind a module lock so concurrent
    callers do not contend for the timer.
    """
    if repetitions < 3:
        raise ValueError("measure needs at least 3 repetitions")
    with _MEASURE_LOCK:
        walls = []
        for _ in range(repetitions):
            _, prof = execute(graph, inputs, config, mode=mode, cost_model=cost_model)
            walls.append(prof.wall_seconds)
    return MeasureResult(
        wall_seconds=float(np.median(walls)),
        modeled_cost=modeled_cost_of(graph, config, cost_model),
    )
