"""Emulated mixed-precision tensor graphs with automatic precision search.

The package has three layers: numeric format emulation and a small
shape-static graph IR (``formats``, ``graph``); an interpreter that
executes graphs under per-node precision assignments while profiling
memory and cost (``interpreter``) plus a greedy tolerance-bounded
precision search (``search``); and a replay-free Gaussian-mixture scene
trainer whose two hot functions run through that interpreter
(``vbmix``, ``scene``), tied together by the ``mixprec`` CLI.
"""

from .formats import (
    FORMAT_ORDER,
    FORMATS,
    FP16,
    FP32,
    FP64,
    TF32,
    PrecisionFormat,
    bytes_of,
    round_to_format,
)
from .graph import (
    Graph,
    GraphBuilder,
    GraphError,
    Node,
    PrecisionConfig,
    contraction_spec,
    uniform_config,
    validate_graph,
)
from .interpreter import (
    CostModel,
    DEFAULT_COST_MODEL,
    ExecutionProfile,
    InterpreterError,
    MeasureResult,
    MODES,
    accumulation_format,
    execute,
    measure,
    modeled_cost_of,
)
from .search import (
    DEFAULT_FORMATS,
    DEFAULT_TAU,
    CastRegion,
    InfeasibleError,
    PrecisionMapError,
    PrecisionMapFormatError,
    PrecisionMapStaleError,
    ProbeEvaluator,
    SearchResult,
    SensitivityTable,
    cast_regions,
    latency_pass,
    load_map,
    map_document,
    precision_pass,
    read_map,
    relative_error,
    save_map,
    search,
    sensitivity_scan,
    structure_pass,
)

__version__ = "0.1.0"

__all__ = [
    "FORMAT_ORDER",
    "FORMATS",
    "FP16",
    "FP32",
    "FP64",
    "TF32",
    "PrecisionFormat",
    "bytes_of",
    "round_to_format",
    "Graph",
    "GraphBuilder",
    "GraphError",
    "Node",
    "PrecisionConfig",
    "contraction_spec",
    "uniform_config",
    "validate_graph",
    "CostModel",
    "DEFAULT_COST_MODEL",
    "ExecutionProfile",
    "InterpreterError",
    "MeasureResult",
    "MODES",
    "accumulation_format",
    "execute",
    "measure",
    "modeled_cost_of",
    "DEFAULT_FORMATS",
    "DEFAULT_TAU",
    "CastRegion",
    "InfeasibleError",
    "PrecisionMapError",
    "PrecisionMapFormatError",
    "PrecisionMapStaleError",
    "ProbeEvaluator",
    "SearchResult",
    "SensitivityTable",
    "cast_regions",
    "latency_pass",
    "load_map",
    "map_document",
    "precision_pass",
    "read_map",
    "relative_error",
    "save_map",
    "search",
    "sensitivity_scan",
    "structure_pass",
    "__version__",
]
