"""Shape-static tensor computation graphs.

A graph is a topologically ordered tuple of nodes.  Sources (``input``,
``constant``) carry a declared storage format; every other node is a
compute node and receives its format from a ``PrecisionConfig`` at
execution time.  Shapes are static: they are inferred once at
validation and never depend on values.

Graphs are immutable after validation and identified by a content
fingerprint that ignores node numbering, so two independently built
graphs with the same wiring, parameters, and input shapes/formats get
the same fingerprint.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .formats import FORMATS, FP64, PrecisionFormat, round_to_format

__all__ = [
    "GraphError",
    "Node",
    "Graph",
    "GraphBuilder",
    "PrecisionConfig",
    "uniform_config",
    "validate_graph",
    "contraction_spec",
    "broadcast_shapes",
]

UNARY_OPS = ("neg", "exp", "log", "sqrt", "digamma", "lgamma", "reciprocal")
BINARY_OPS = ("add", "sub", "mul", "div", "max")
SOURCE_KINDS = ("input", "constant")
COMPUTE_KINDS = (
    "unary",
    "binary",
    "reduce_sum",
    "reduce_max",
    "contraction",
    "transpose",
    "reshape",
    "cast",
)


class GraphError(ValueError):
    """Raised for malformed graphs: bad wiring, shapes, or parameters."""


@dataclass(frozen=True, eq=False)
class Node:
    nid: int
    kind: str
    op: str | None = None
    operands: tuple[int, ...] = ()
    out_shape: tuple[int, ...] = ()
    params: tuple[tuple[str, Any], ...] = ()
    fmt: str = "fp64"  # declared storage format; meaningful for sources
    name: str | None = None  # inputs only
    value: np.ndarray | None = None  # constants only

    def param(self, key: str, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default

    @property
    def is_source(self) -> bool:
        return self.kind in SOURCE_KINDS


def broadcast_shapes(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Trailing-aligned broadcast of two shapes, numpy rules."""
    try:
        return tuple(int(d) for d in np.broadcast_shapes(tuple(a), tuple(b)))
    except ValueError as exc:
        raise GraphError(f"shapes {tuple(a)} and {tuple(b)} do not broadcast") from exc


def contraction_spec(
    lhs_shape: Sequence[int],
    rhs_shape: Sequence[int],
    contract: tuple[tuple[int, ...], tuple[int, ...]],
    batch: tuple[tuple[int, ...], tuple[int, ...]] = ((), ()),
):
    """Validate a two-operand contraction and derive its layout.

    ``contract`` pairs summed axes of lhs/rhs; ``batch`` pairs aligned
    axes kept in the output.  Output layout is batch axes (lhs order),
    then free lhs axes, then free rhs axes.  Returns a dict with the
    output shape, the axis permutations used by the interpreter, and the
    flattened batch/free/contract extents.
    """
    lsh, rsh = tuple(lhs_shape), tuple(rhs_shape)
    cl, cr = tuple(contract[0]), tuple(contract[1])
    bl, br = tuple(batch[0]), tuple(batch[1])
    if len(cl) != len(cr):
        raise GraphError("contract axis lists must pair up")
    if len(bl) != len(br):
        raise GraphError("batch axis lists must pair up")

    def _check(axes, ndim, side):
        seen = set()
        for ax in axes:
            if not (0 <= ax < ndim):
                raise GraphError(f"{side} axis {ax} out of range for rank {ndim}")
            if ax in seen:
                raise GraphError(f"{side} axis {ax} repeated")
            seen.add(ax)

    _check(bl + cl, len(lsh), "lhs")
    _check(br + cr, len(rsh), "rhs")
    for al, ar in zip(bl, br):
        if lsh[al] != rsh[ar]:
            raise GraphError(f"batch extents differ: lhs[{al}]={lsh[al]} rhs[{ar}]={rsh[ar]}")
    for al, ar in zip(cl, cr):
        if lsh[al] != rsh[ar]:
            raise GraphError(
                f"contract extents differ: lhs[{al}]={lsh[al]} rhs[{ar}]={rsh[ar]}"
            )
    fl = tuple(ax for ax in range(len(lsh)) if ax not in bl + cl)
    fr = tuple(ax for ax in range(len(rsh)) if ax not in br + cr)
    batch_shape = tuple(lsh[ax] for ax in bl)
    lfree_shape = tuple(lsh[ax] for ax in fl)
    rfree_shape = tuple(rsh[ax] for ax in fr)
    con_shape = tuple(lsh[ax] for ax in cl)
    prod = lambda t: int(np.prod(t, dtype=np.int64)) if t else 1
    return {
        "out_shape": batch_shape + lfree_shape + rfree_shape,
        "lhs_perm": bl + fl + cl,
        "rhs_perm": br + fr + cr,
        "batch_elems": prod(batch_shape),
        "lfree_elems": prod(lfree_shape),
        "rfree_elems": prod(rfree_shape),
        "contract_elems": prod(con_shape),
    }


def _infer_shape(node: Node, shapes: Mapping[int, tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    if kind == "input":
        return node.out_shape
    if kind == "constant":
        return tuple(node.value.shape)
    ops = [shapes[o] for o in node.operands]
    if kind == "unary":
        if node.op not in UNARY_OPS:
            raise GraphError(f"unknown unary op {node.op!r}")
        return ops[0]
    if kind == "binary":
        if node.op not in BINARY_OPS:
            raise GraphError(f"unknown binary op {node.op!r}")
        return broadcast_shapes(ops[0], ops[1])
    if kind in ("reduce_sum", "reduce_max"):
        axes = node.param("axes")
        shape = ops[0]
        if not axes:
            raise GraphError("reduce needs a nonempty axis tuple")
        for ax in axes:
            if not (0 <= ax < len(shape)):
                raise GraphError(f"reduce axis {ax} out of range for rank {len(shape)}")
        if len(set(axes)) != len(axes):
            raise GraphError("reduce axes repeated")
        return tuple(d for i, d in enumerate(shape) if i not in axes)
    if kind == "contraction":
        spec = contraction_spec(
            ops[0],
            ops[1],
            (node.param("contract_lhs"), node.param("contract_rhs")),
            (node.param("batch_lhs"), node.param("batch_rhs")),
        )
        return spec["out_shape"]
    if kind == "transpose":
        perm = node.param("perm")
        shape = ops[0]
        if sorted(perm) != list(range(len(shape))):
            raise GraphError(f"perm {perm} is not a permutation of rank {len(shape)}")
        return tuple(shape[p] for p in perm)
    if kind == "reshape":
        shape = node.param("shape")
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(ops[0], dtype=np.int64)):
            raise GraphError(f"reshape {ops[0]} -> {shape} changes element count")
        return tuple(shape)
    if kind == "cast":
        return ops[0]
    raise GraphError(f"unknown node kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Graph:
    name: str
    nodes: tuple[Node, ...]
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    fingerprint: str
    consumers: tuple[tuple[int, ...], ...]

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(self.nodes[i].name for i in self.inputs)

    def compute_ids(self) -> tuple[int, ...]:
        return tuple(n.nid for n in self.nodes if n.kind not in SOURCE_KINDS and n.kind != "cast")

    def dump(self) -> str:
        """Stable one-node-per-line listing."""
        lines = [f"graph {self.name} inputs={list(self.inputs)} outputs={list(self.outputs)}"]
        for n in self.nodes:
            bits = [f"{n.nid}:", n.kind]
            if n.op:
                bits.append(f"op={n.op}")
            if n.name:
                bits.append(f"name={n.name}")
            if n.operands:
                bits.append(f"operands={list(n.operands)}")
            bits.append(f"shape={list(n.out_shape)}")
            if n.params:
                bits.append("params=" + ",".join(f"{k}={v}" for k, v in n.params))
            if n.is_source:
                bits.append(f"fmt={n.fmt}")
            lines.append(" ".join(bits))
        return "\n".join(lines)


def _fingerprint(nodes, inputs, outputs) -> str:
    h = hashlib.sha256()
    h.update(f"inputs={list(inputs)};outputs={list(outputs)}\n".encode())
    for n in nodes:
        parts = [
            str(n.nid),
            n.kind,
            n.op or "",
            repr(n.params),
            repr(n.operands),
            repr(n.out_shape),
        ]
        if n.is_source:
            parts.append(n.fmt)
        if n.kind == "input":
            parts.append(n.name or "")
        if n.kind == "constant":
            parts.append(hashlib.sha256(np.ascontiguousarray(n.value).tobytes()).hexdigest())
        h.update(("|".join(parts) + "\n").encode())
    return h.hexdigest()


def validate_graph(name: str, nodes: Sequence[Node], outputs: Sequence[int]) -> Graph:
    """Check wiring and shapes, prune dead nodes, and freeze the graph.

    Nodes may carry arbitrary unique ids but must be listed so operands
    refer only to earlier entries (a forward or unknown reference is
    reported as a cycle/unknown-id error).  The returned graph is
    renumbered positionally; the fingerprint is computed on that
    canonical form, so it is invariant under renumbering.
    """
    if not outputs:
        raise GraphError("graph needs at least one output")
    ids = [n.nid for n in nodes]
    if len(set(ids)) != len(ids):
        raise GraphError("duplicate node ids")
    defined: dict[int, int] = {}
    for pos, n in enumerate(nodes):
        for o in n.operands:
            if o not in defined:
                raise GraphError(
                    f"operand {o} of node {n.nid} is not defined earlier (cycle or unknown id)"
                )
        defined[n.nid] = pos
    for o in outputs:
        if o not in defined:
            raise GraphError(f"output {o} is not a node id")
    id_set = set()
    for n in nodes:
        if n.kind == "input":
            if not n.name:
                raise GraphError(f"input node {n.nid} needs a name")
            if n.name in id_set:
                raise GraphError(f"duplicate input name {n.name!r}")
            id_set.add(n.name)
            if n.fmt not in FORMATS:
                raise GraphError(f"unknown format {n.fmt!r}")
        if n.kind == "constant" and n.value is None:
            raise GraphError(f"constant node {n.nid} has no value")

    # Backward reachability from outputs; inputs are interface and stay.
    live = set(outputs)
    for n in reversed(nodes):
        if n.nid in live:
            live.update(n.operands)
    kept = [n for n in nodes if n.nid in live or n.kind == "input"]

    remap = {n.nid: i for i, n in enumerate(kept)}
    renumbered = []
    shapes: dict[int, tuple[int, ...]] = {}
    for n in kept:
        node = Node(
            nid=remap[n.nid],
            kind=n.kind,
            op=n.op,
            operands=tuple(remap[o] for o in n.operands),
            out_shape=n.out_shape,
            params=n.params,
            fmt=n.fmt,
            name=n.name,
            value=n.value,
        )
        inferred = _infer_shape(node, shapes)
        if node.kind != "input" and node.out_shape and tuple(node.out_shape) != inferred:
            raise GraphError(
                f"node {node.nid} declares shape {node.out_shape}, inferred {inferred}"
            )
        node = Node(
            nid=node.nid,
            kind=node.kind,
            op=node.op,
            operands=node.operands,
            out_shape=inferred,
            params=node.params,
            fmt=node.fmt,
            name=node.name,
            value=node.value,
        )
        shapes[node.nid] = inferred
        renumbered.append(node)

    new_inputs = tuple(n.nid for n in renumbered if n.kind == "input")
    new_outputs = tuple(remap[o] for o in outputs)
    consumers: list[list[int]] = [[] for _ in renumbered]
    for n in renumbered:
        for o in n.operands:
            consumers[o].append(n.nid)
    fp = _fingerprint(renumbered, new_inputs, new_outputs)
    return Graph(
        name=name,
        nodes=tuple(renumbered),
        inputs=new_inputs,
        outputs=new_outputs,
        fingerprint=fp,
        consumers=tuple(tuple(c) for c in consumers),
    )


class GraphBuilder:
    """Incremental construction with immediate shape checking.

    Methods return integer node ids.  ``build(outputs)`` validates and
    freezes the graph.
    """

    def __init__(self, name: str = "graph"):
        self.name = name
        self._nodes: list[Node] = []

    def _add(self, **kw) -> int:
        nid = len(self._nodes)
        node = Node(nid=nid, **kw)
        shapes = {n.nid: n.out_shape for n in self._nodes}
        shape = _infer_shape(node, shapes)
        node = Node(
            nid=nid,
            kind=node.kind,
            op=node.op,
            operands=node.operands,
            out_shape=shape,
            params=node.params,
            fmt=node.fmt,
            name=node.name,
            value=node.value,
        )
        self._nodes.append(node)
        return nid

    def input(self, name: str, shape: Sequence[int], fmt: PrecisionFormat = FP64) -> int:
        return self._add(kind="input", out_shape=tuple(int(d) for d in shape), fmt=fmt.name, name=name)

    def constant(self, value, fmt: PrecisionFormat = FP64) -> int:
        # Constants are stored at their declared format.
        arr = np.asarray(round_to_format(np.asarray(value, dtype=np.float64), fmt))
        arr.setflags(write=False)
        return self._add(kind="constant", fmt=fmt.name, value=arr)

    def unary(self, op: str, x: int) -> int:
        return self._add(kind="unary", op=op, operands=(x,))

    def binary(self, op: str, a: int, b: int) -> int:
        return self._add(kind="binary", op=op, operands=(a, b))

    def neg(self, x):
        return self.unary("neg", x)

    def exp(self, x):
        return self.unary("exp", x)

    def log(self, x):
        return self.unary("log", x)

    def sqrt(self, x):
        return self.unary("sqrt", x)

    def digamma(self, x):
        return self.unary("digamma", x)

    def lgamma(self, x):
        return self.unary("lgamma", x)

    def reciprocal(self, x):
        return self.unary("reciprocal", x)

    def add(self, a, b):
        return self.binary("add", a, b)

    def sub(self, a, b):
        return self.binary("sub", a, b)

    def mul(self, a, b):
        return self.binary("mul", a, b)

    def div(self, a, b):
        return self.binary("div", a, b)

    def maximum(self, a, b):
        return self.binary("max", a, b)

    def reduce_sum(self, x: int, axes: Sequence[int]) -> int:
        axes = tuple(sorted(int(a) for a in axes))
        return self._add(kind="reduce_sum", operands=(x,), params=(("axes", axes),))

    def reduce_max(self, x: int, axes: Sequence[int]) -> int:
        axes = tuple(sorted(int(a) for a in axes))
        return self._add(kind="reduce_max", operands=(x,), params=(("axes", axes),))

    def contract(
        self,
        lhs: int,
        rhs: int,
        contract: tuple[Sequence[int], Sequence[int]],
        batch: tuple[Sequence[int], Sequence[int]] = ((), ()),
    ) -> int:
        params = (
            ("batch_lhs", tuple(int(a) for a in batch[0])),
            ("batch_rhs", tuple(int(a) for a in batch[1])),
            ("contract_lhs", tuple(int(a) for a in contract[0])),
            ("contract_rhs", tuple(int(a) for a in contract[1])),
        )
        return self._add(kind="contraction", operands=(lhs, rhs), params=params)

    def transpose(self, x: int, perm: Sequence[int]) -> int:
        return self._add(
            kind="transpose", operands=(x,), params=(("perm", tuple(int(p) for p in perm)),)
        )

    def reshape(self, x: int, shape: Sequence[int]) -> int:
        return self._add(
            kind="reshape", operands=(x,), params=(("shape", tuple(int(d) for d in shape)),)
        )

    def build(self, outputs: Sequence[int]) -> Graph:
        return validate_graph(self.name, self._nodes, tuple(outputs))


@dataclass
class PrecisionConfig:
    """Total map from compute-node id to format for one graph."""

    assignment: dict[int, PrecisionFormat]

    def for_graph(self, graph: Graph) -> None:
        want = set(graph.compute_ids())
        got = set(self.assignment)
        if want != got:
            missing = sorted(want - got)
            extra = sorted(got - want)
            raise GraphError(
                f"precision config does not cover compute nodes exactly "
                f"(missing={missing}, extra={extra})"
            )

    def fmt(self, nid: int) -> PrecisionFormat:
        return self.assignment[nid]

    def with_nodes(self, updates: Mapping[int, PrecisionFormat]) -> "PrecisionConfig":
        new = dict(self.assignment)
        new.update(updates)
        return PrecisionConfig(new)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for f in self.assignment.values():
            out[f.name] = out.get(f.name, 0) + 1
        return out

    def key(self) -> tuple:
        return tuple(sorted((nid, f.name) for nid, f in self.assignment.items()))

    def to_name_map(self) -> dict[int, str]:
        return {nid: f.name for nid, f in self.assignment.items()}


def uniform_config(graph: Graph, fmt: PrecisionFormat) -> PrecisionConfig:
    return PrecisionConfig({nid: fmt for nid in graph.compute_ids()})
