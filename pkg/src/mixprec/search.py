"""Automatic per-node precision assignment under a bounded-error constraint.

The search fixes a probe input, takes the all-fp64 run as reference, and
accepts a configuration when the robust relative error of its output
stays within epsilon.  Three passes run in order:

1. precision pass: score every node by the output error of downcasting
   it alone, start from the all-lowest configuration, and promote nodes
   to fp64 in order of decreasing score until the constraint holds; then
   retry the promoted set at each intermediate format, re-promoting the
   ones that format cannot hold.
2. structure pass: grow the reduced regions outward.  Every reduced node
   seeds attempts to downcast its producers and consumers one level;
   accepted downcasts become new seeds.
3. latency pass: group reduced nodes into cast-bounded regions (maximal
   connected same-format subgraphs below fp64) and revert any region
   whose format casts cost more than its reduced compute saves, one
   level at a time, cheapest formats first.

Every pass preserves feasibility, and the final assignment never models
slower than all-fp64.  The whole procedure is deterministic for a fixed
graph, probe, epsilon, and option set.

The resulting assignment persists as a small JSON document keyed by the
graph's content fingerprint, so a stale map (graph changed since the
offline search) is rejected at load time instead of silently misapplied.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formats import FORMATS, FP16, FP32, FP64, TF32, PrecisionFormat
from .graph import Graph, GraphError, PrecisionConfig, uniform_config
from .interpreter import DEFAULT_COST_MODEL, CostModel, execute, measure, modeled_cost_of

__all__ = [
    "InfeasibleError",
    "PrecisionMapError",
    "PrecisionMapFormatError",
    "PrecisionMapStaleError",
    "relative_error",
    "SensitivityTable",
    "CastRegion",
    "ProbeEvaluator",
    "SearchResult",
    "sensitivity_scan",
    "precision_pass",
    "structure_pass",
    "cast_regions",
    "latency_pass",
    "search",
    "map_document",
    "save_map",
    "load_map",
    "read_map",
    "DEFAULT_FORMATS",
    "MAP_SCHEMA_VERSION",
]

DEFAULT_FORMATS = (FP16, TF32, FP32, FP64)
DEFAULT_TAU = 1e-12
MAP_SCHEMA_VERSION = 1


class InfeasibleError(RuntimeError):
    """No candidate configuration satisfies the error bound."""


class PrecisionMapError(RuntimeError):
    """Base class for precision-map persistence failures."""


class PrecisionMapFormatError(PrecisionMapError):
    """The map file is not a well-formed precision map."""


class PrecisionMapStaleError(PrecisionMapError):
    """The map was computed for a different graph (fingerprint mismatch)."""


def _flatten_outputs(y) -> list[np.ndarray]:
    if isinstance(y, np.ndarray) or np.isscalar(y):
        return [np.asarray(y, dtype=np.float64)]
    return [np.asarray(a, dtype=np.float64) for a in y]


def relative_error(y_h, y, tau: float = DEFAULT_TAU) -> float:
    """Robust relative error ||y_h - y|| / max(||y_h||, tau).

    ``y_h`` is the reference, ``y`` the candidate output; either may be a
    single array or a sequence of arrays (multi-output functions flatten
    and concatenate).  Returns +inf when the candidate is non-finite
    anywhere the reference is finite.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    ref = _flatten_outputs(y_h)
    cand = _flatten_outputs(y)
    if len(ref) != len(cand):
        raise ValueError(f"output count mismatch: {len(ref)} vs {len(cand)}")
    for a, b in zip(ref, cand):
        if a.shape != b.shape:
            raise ValueError(f"output shape mismatch: {a.shape} vs {b.shape}")
    a = np.concatenate([x.ravel() for x in ref]) if ref else np.zeros(0)
    b = np.concatenate([x.ravel() for x in cand]) if cand else np.zeros(0)
    if np.any(~np.isfinite(b) & np.isfinite(a)):
        return float("inf")
    with np.errstate(all="ignore"):
        num = float(np.linalg.norm(a - b))
    if not np.isfinite(num):
        return float("inf")
    den = max(float(np.linalg.norm(a)), tau)
    return num / den


def _ordered_formats(formats) -> tuple[PrecisionFormat, ...]:
    out = []
    for f in formats:
        fmt = f if isinstance(f, PrecisionFormat) else FORMATS[f]
        if fmt not in out:
            out.append(fmt)
    out.sort(key=lambda f: f.level)
    if len(out) < 2:
        raise ValueError("candidate set needs at least two formats")
    if out[-1].name != FP64.name:
        raise ValueError("candidate set must include fp64")
    return tuple(out)


def _as_probes(inputs) -> tuple[Mapping[str, np.ndarray], ...]:
    if isinstance(inputs, Mapping):
        return (inputs,)
    probes = tuple(inputs)
    if not probes:
        raise ValueError("need at least one probe input")
    return probes


class ProbeEvaluator:
    """Caches per-configuration output error against the all-fp64 reference.

    The reference run is executed once per probe at construction.  Error
    for a configuration is the mean robust relative error over probes
    (one probe is the default everywhere).  Failed executions score +inf
    rather than aborting.  Evaluations are counted for reporting.
    """

    def __init__(
        self,
        graph: Graph,
        inputs,
        tau: float = DEFAULT_TAU,
        mode: str = "fused_contraction",
        cost_model: CostModel = DEFAULT_COST_MODEL,
    ):
        self.graph = graph
        self.probes = _as_probes(inputs)
        self.tau = tau
        self.mode = mode
        self.cost_model = cost_model
        self.high = uniform_config(graph, FP64)
        self.references = [
            execute(graph, p, self.high, mode=mode, cost_model=cost_model)[0]
            for p in self.probes
        ]
        self.evaluations = 0
        self._cache: dict[tuple, float] = {}

    def error_of(self, config: PrecisionConfig) -> float:
        key = config.key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        errs = []
        for probe, ref in zip(self.probes, self.references):
            try:
                out, _ = execute(
                    self.graph, probe, config, mode=self.mode, cost_model=self.cost_model
                )
            except Exception:
                errs.append(float("inf"))
                continue
            errs.append(relative_error(ref, out, self.tau))
        self.evaluations += 1
        err = float(np.mean(errs))
        self._cache[key] = err
        return err


@dataclass(frozen=True)
class SensitivityTable:
    """Map (node id, format name) -> output error of that single downcast."""

    scores: Mapping[tuple[int, str], float]

    def score(self, nid: int, fmt_name: str) -> float:
        return self.scores[(nid, fmt_name)]

    def rows(self) -> list[tuple[int, str, float]]:
        return sorted(
            ((nid, f, s) for (nid, f), s in self.scores.items()),
            key=lambda r: (r[0], FORMATS[r[1]].level),
        )


def sensitivity_scan(
    graph: Graph,
    inputs,
    formats=DEFAULT_FORMATS,
    tau: float = DEFAULT_TAU,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
    evaluator: ProbeEvaluator | None = None,
) -> SensitivityTable:
    """Score every compute node by downcasting it alone from all-fp64.

    Exactly one perturbed run per (node, reduced format); the highest
    format scores 0 by definition.
    """
    fmts = _ordered_formats(formats)
    ev = evaluator or ProbeEvaluator(graph, inputs, tau, mode, cost_model)
    scores: dict[tuple[int, str], float] = {}
    for nid in graph.compute_ids():
        scores[(nid, FP64.name)] = 0.0
        for fmt in fmts[:-1]:
            scores[(nid, fmt.name)] = ev.error_of(ev.high.with_nodes({nid: fmt}))
    return SensitivityTable(scores)


def _promote_until_feasible(ev, config, candidates, order_fmt, table, epsilon, high):
    """Promote candidates to fp64 in decreasing score order until err <= epsilon.

    Returns (config, promoted list, final error).  Ties break on
    ascending node id.
    """
    err = ev.error_of(config)
    promoted: list[int] = []
    if err <= epsilon:
        return config, promoted, err
    order = sorted(candidates, key=lambda nid: (-table.score(nid, order_fmt), nid))
    for nid in order:
        config = config.with_nodes({nid: high})
        promoted.append(nid)
        err = ev.error_of(config)
        if err <= epsilon:
            return config, promoted, err
    raise InfeasibleError(
        f"error {err:.3e} > epsilon {epsilon:.3e} with every candidate promoted"
    )


def precision_pass(
    graph: Graph,
    inputs,
    epsilon: float,
    formats=DEFAULT_FORMATS,
    table: SensitivityTable | None = None,
    tau: float = DEFAULT_TAU,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
    evaluator: ProbeEvaluator | None = None,
) -> tuple[PrecisionConfig, list[dict]]:
    """Sensitivity-ordered promotion from the all-lowest configuration.

    Stage one promotes to fp64 until feasible.  Each intermediate format
    then gets one chance at the promoted set: lower the whole set to it,
    and re-promote members (by that format's scores) while the bound is
    violated.  Nodes re-promoted in the last stage stay fp64.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    fmts = _ordered_formats(formats)
    ev = evaluator or ProbeEvaluator(graph, inputs, tau, mode, cost_model)
    if table is None:
        table = sensitivity_scan(graph, inputs, fmts, tau, mode, cost_model, evaluator=ev)
    low, high = fmts[0], fmts[-1]

    config = uniform_config(graph, low)
    config, promoted, err = _promote_until_feasible(
        ev, config, graph.compute_ids(), low.name, table, epsilon, high
    )
    history = [
        {"stage": "promote", "format": low.name, "promoted": list(promoted), "error": err}
    ]
    undecided = set(promoted)
    for fmt in fmts[1:-1]:
        if not undecided:
            history.append(
                {"stage": "refine", "format": fmt.name, "lowered": [], "repromoted": [], "error": err}
            )
            continue
        lowered = sorted(undecided)
        config = config.with_nodes({nid: fmt for nid in lowered})
        config, repromoted, err = _promote_until_feasible(
            ev, config, lowered, fmt.name, table, epsilon, high
        )
        history.append(
            {
                "stage": "refine",
                "format": fmt.name,
                "lowered": lowered,
                "repromoted": list(repromoted),
                "error": err,
            }
        )
        undecided = set(repromoted)
    return config, history


def _compute_neighbors(graph: Graph, nid: int) -> list[int]:
    compute = set(graph.compute_ids())
    near = set(graph.node(nid).operands) | set(graph.consumers[nid])
    return sorted(near & compute)


def structure_pass(
    graph: Graph,
    inputs,
    epsilon: float,
    config: PrecisionConfig,
    formats=DEFAULT_FORMATS,
    tau: float = DEFAULT_TAU,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
    evaluator: ProbeEvaluator | None = None,
) -> tuple[PrecisionConfig, list[dict]]:
    """Grow reduced regions by one-level downcasts of seed neighbors.

    Seeds are the nodes already below fp64; a committed downcast makes
    the neighbor (and the seed, whose other neighbors may now tolerate
    more) eligible again.  Only lowers formats; every commit re-checks
    the error bound.
    """
    fmts = _ordered_formats(formats)
    level_of = {f.name: i for i, f in enumerate(fmts)}
    ev = evaluator or ProbeEvaluator(graph, inputs, tau, mode, cost_model)

    for nid in graph.compute_ids():
        if config.fmt(nid).name not in level_of:
            raise ValueError(f"node {nid} format {config.fmt(nid).name} not in candidate set")

    heap = sorted(nid for nid in graph.compute_ids() if config.fmt(nid).name != FP64.name)
    queued = set(heap)
    history: list[dict] = []
    while heap:
        seed = heapq.heappop(heap)
        queued.discard(seed)
        for nb in _compute_neighbors(graph, seed):
            cur = config.fmt(nb)
            idx = level_of[cur.name]
            if idx == 0:
                continue
            trial_fmt = fmts[idx - 1]
            trial = config.with_nodes({nb: trial_fmt})
            err = ev.error_of(trial)
            accepted = err <= epsilon
            history.append(
                {
                    "seed": seed,
                    "node": nb,
                    "from": cur.name,
                    "to": trial_fmt.name,
                    "error": err,
                    "accepted": accepted,
                }
            )
            if accepted:
                config = trial
                for nid in (nb, seed):
                    if nid not in queued:
                        heapq.heappush(heap, nid)
                        queued.add(nid)
    return config, history


@dataclass(frozen=True)
class CastRegion:
    """Maximal connected same-format subgraph strictly below fp64."""

    nodes: tuple[int, ...]
    fmt: str
    boundary_cast_bytes: int

    @property
    def level(self) -> int:
        return FORMATS[self.fmt].level


def cast_regions(graph: Graph, config: PrecisionConfig) -> list[CastRegion]:
    """Partition the reduced compute nodes into cast-bounded regions."""
    from .formats import bytes_of

    compute = set(graph.compute_ids())
    fmt_of = {}
    for n in graph.nodes:
        if n.is_source or n.kind == "cast":
            fmt_of[n.nid] = n.fmt
        else:
            fmt_of[n.nid] = config.fmt(n.nid).name
    reduced = [nid for nid in sorted(compute) if fmt_of[nid] != FP64.name]
    unvisited = set(reduced)
    regions = []
    for start in reduced:
        if start not in unvisited:
            continue
        fmt = fmt_of[start]
        members = {start}
        unvisited.discard(start)
        frontier = [start]
        while frontier:
            nid = frontier.pop()
            for nb in _compute_neighbors(graph, nid):
                if nb in unvisited and fmt_of[nb] == fmt:
                    unvisited.discard(nb)
                    members.add(nb)
                    frontier.append(nb)
        # Boundary casts, deduplicated the way the interpreter counts them.
        bbytes = 0
        seen: set[tuple[int, str]] = set()
        for nid in sorted(members):
            for oid in graph.node(nid).operands:
                key = (oid, fmt)
                if key not in seen and fmt_of[oid] != fmt:
                    seen.add(key)
                    bbytes += bytes_of(graph.node(oid).out_shape, FORMATS[fmt])
            for cid in graph.consumers[nid]:
                if cid in members:
                    continue
                cfmt = fmt_of[cid]
                key = (nid, cfmt)
                if key not in seen and cfmt != fmt:
                    seen.add(key)
                    bbytes += bytes_of(graph.node(nid).out_shape, FORMATS[cfmt])
        regions.append(CastRegion(tuple(sorted(members)), fmt, bbytes))
    regions.sort(key=lambda r: (r.level, r.nodes[0]))
    return regions


def latency_pass(
    graph: Graph,
    inputs,
    config: PrecisionConfig,
    epsilon: float,
    formats=DEFAULT_FORMATS,
    cost_source: str = "model",
    tau: float = DEFAULT_TAU,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
    measure_reps: int = 5,
    evaluator: ProbeEvaluator | None = None,
) -> tuple[PrecisionConfig, list[dict]]:
    """Revert cast-bounded regions whose reduced format does not pay off.

    A region is kept when running it reduced (casts included) models or
    measures strictly faster than one level up; otherwise it is raised a
    level and re-examined at its new format.  Lowest formats first; any
    revert invalidates earlier keep decisions because it can change a
    neighbor region's cast boundary.
    """
    if cost_source not in ("model", "wallclock"):
        raise ValueError("cost_source must be 'model' or 'wallclock'")
    fmts = _ordered_formats(formats)
    level_of = {f.name: i for i, f in enumerate(fmts)}
    ev = evaluator or ProbeEvaluator(graph, inputs, tau, mode, cost_model)
    probe = ev.probes[0]

    def cost_of(cfg: PrecisionConfig) -> float:
        if cost_source == "model":
            return modeled_cost_of(graph, cfg, cost_model)
        return measure(
            graph, probe, cfg, repetitions=measure_reps, mode=mode, cost_model=cost_model
        ).wall_seconds

    kept: set[tuple[frozenset, str]] = set()
    history: list[dict] = []
    while True:
        regions = cast_regions(graph, config)
        target = next(
            (r for r in regions if (frozenset(r.nodes), r.fmt) not in kept), None
        )
        if target is None:
            break
        up = fmts[level_of[target.fmt] + 1]
        reverted = config.with_nodes({nid: up for nid in target.nodes})
        delta = cost_of(reverted) - cost_of(config)
        entry = {
            "region": list(target.nodes),
            "format": target.fmt,
            "boundary_cast_bytes": target.boundary_cast_bytes,
            "delta": delta,
        }
        if delta <= 0:
            err = ev.error_of(reverted)
            if err > epsilon:
                raise InfeasibleError(
                    f"raising region {target.nodes} to {up.name} violated the bound"
                )
            config = reverted
            kept.clear()
            entry.update(action="reverted", to=up.name, error=err)
        else:
            kept.add((frozenset(target.nodes), target.fmt))
            entry.update(action="kept")
        history.append(entry)
    return config, history


@dataclass(frozen=True)
class SearchResult:
    config: PrecisionConfig
    report: dict


def search(
    graph: Graph,
    inputs,
    epsilon: float,
    formats=DEFAULT_FORMATS,
    tau: float = DEFAULT_TAU,
    mode: str = "fused_contraction",
    cost_model: CostModel = DEFAULT_COST_MODEL,
    cost_source: str = "model",
    probe_seed: int | None = None,
    measure_reps: int = 5,
) -> SearchResult:
    """Run scan and all three passes; return the assignment plus a report.

    The report is JSON-ready (integer node ids become string keys) and
    carries everything needed to reproduce or audit the run: scores,
    per-pass histories, format census, and modeled/measured cost of the
    result against all-fp64.  ``probe_seed`` is recorded verbatim for
    provenance; callers generate the probe input from it.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    fmts = _ordered_formats(formats)
    ev = ProbeEvaluator(graph, inputs, tau, mode, cost_model)
    table = sensitivity_scan(graph, inputs, fmts, tau, mode, cost_model, evaluator=ev)
    cfg, hist_precision = precision_pass(
        graph, inputs, epsilon, fmts, table, tau, mode, cost_model, evaluator=ev
    )
    cfg, hist_structure = structure_pass(
        graph, inputs, epsilon, cfg, fmts, tau, mode, cost_model, evaluator=ev
    )
    cfg, hist_latency = latency_pass(
        graph,
        inputs,
        cfg,
        epsilon,
        fmts,
        cost_source,
        tau,
        mode,
        cost_model,
        measure_reps,
        evaluator=ev,
    )

    high = ev.high
    cost_high = modeled_cost_of(graph, high, cost_model)
    cost_star = modeled_cost_of(graph, cfg, cost_model)
    guard_applied = cost_star > cost_high
    if guard_applied:
        # The passes never make the model worse than all-fp64; fall back
        # if cast overhead ever tips the balance.
        cfg = high
        cost_star = cost_high
    err_star = ev.error_of(cfg)
    if err_star > epsilon:
        raise InfeasibleError(f"final error {err_star:.3e} exceeds epsilon {epsilon:.3e}")

    wall_high = measure(
        graph, ev.probes[0], high, repetitions=measure_reps, mode=mode, cost_model=cost_model
    ).wall_seconds
    wall_star = measure(
        graph, ev.probes[0], cfg, repetitions=measure_reps, mode=mode, cost_model=cost_model
    ).wall_seconds

    report = {
        "function": graph.name,
        "graph_fingerprint": graph.fingerprint,
        "epsilon": epsilon,
        "tau": tau,
        "probe_seed": probe_seed,
        "formats": [f.name for f in fmts],
        "mode": mode,
        "cost_source": cost_source,
        "sensitivity": [[nid, f, s] for nid, f, s in table.rows()],
        "passes": {
            "precision": hist_precision,
            "structure": hist_structure,
            "latency": hist_latency,
        },
        "format_counts": cfg.counts(),
        "assignment": {str(nid): f.name for nid, f in sorted(cfg.assignment.items())},
        "error": err_star,
        "modeled_cost_high": cost_high,
        "modeled_cost_star": cost_star,
        "modeled_cost_ratio": cost_star / cost_high,
        "wall_seconds_high": wall_high,
        "wall_seconds_star": wall_star,
        "cost_guard_applied": guard_applied,
        "evaluations": ev.evaluations,
    }
    return SearchResult(config=cfg, report=report)


def map_document(
    config: PrecisionConfig,
    graph: Graph,
    epsilon: float,
    tau: float = DEFAULT_TAU,
    formats=DEFAULT_FORMATS,
    probe_seed: int | None = None,
) -> dict:
    config.for_graph(graph)
    return {
        "schema_version": MAP_SCHEMA_VERSION,
        "function": graph.name,
        "epsilon": epsilon,
        "tau": tau,
        "formats": [f.name for f in _ordered_formats(formats)],
        "graph_fingerprint": graph.fingerprint,
        "probe_seed": probe_seed,
        "assignment": {str(nid): f.name for nid, f in sorted(config.assignment.items())},
    }


def save_map(path, doc) -> None:
    """Write a precision map; byte-identical for identical content.

    Accepts a document dict from ``map_document`` or a ``SearchResult``
    (whose report carries all the metadata).
    """
    if isinstance(doc, SearchResult):
        r = doc.report
        doc = {
            "schema_version": MAP_SCHEMA_VERSION,
            "function": r["function"],
            "epsilon": r["epsilon"],
            "tau": r["tau"],
            "formats": list(r["formats"]),
            "graph_fingerprint": r["graph_fingerprint"],
            "probe_seed": r["probe_seed"],
            "assignment": dict(r["assignment"]),
        }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


def read_map(path) -> dict:
    """Parse and structurally check a map file, without a target graph."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise PrecisionMapFormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise PrecisionMapFormatError(f"{path}: expected a JSON object")
    if doc.get("schema_version") != MAP_SCHEMA_VERSION:
        raise PrecisionMapFormatError(
            f"{path}: unsupported schema_version {doc.get('schema_version')!r}"
        )
    required = ("function", "epsilon", "formats", "graph_fingerprint", "assignment")
    missing = [k for k in required if k not in doc]
    if missing:
        raise PrecisionMapFormatError(f"{path}: missing fields {missing}")
    if not isinstance(doc["assignment"], dict):
        raise PrecisionMapFormatError(f"{path}: assignment must be an object")
    return doc


def load_map(path, graph: Graph) -> PrecisionConfig:
    """Load an assignment for this exact graph; stale maps are rejected.

    Staleness is decided by the graph fingerprint alone; epsilon and the
    other metadata fields are provenance, not validation.
    """
    doc = read_map(path)
    if doc["graph_fingerprint"] != graph.fingerprint:
        raise PrecisionMapStaleError(
            f"{path}: map fingerprint {doc['graph_fingerprint'][:12]} does not match "
            f"graph {graph.name!r} fingerprint {graph.fingerprint[:12]} "
            "(function, shapes, or formats changed; rerun the search)"
        )
    assignment = {}
    for key, fname in doc["assignment"].items():
        try:
            nid = int(key)
        except ValueError as exc:
            raise PrecisionMapFormatError(f"{path}: bad node id {key!r}") from exc
        if fname not in FORMATS:
            raise PrecisionMapFormatError(f"{path}: unknown format {fname!r}")
        assignment[nid] = FORMATS[fname]
    config = PrecisionConfig(assignment)
    try:
        config.for_graph(graph)
    except GraphError as exc:
        raise PrecisionMapFormatError(f"{path}: {exc}") from exc
    return config
