"""Replay-free streaming trainer for the Gaussian-mixture scene model.

Frames arrive once, in order, and are never revisited: everything the
model keeps from the past lives in the conjugate prior and one global
``SufficientStats`` accumulator.  Per frame the loop is

1. reassignment: the components with the smallest accumulated soft
   count are re-seeded at the current frame's worst-explained points
   (their statistic rows are cleared, so the next posterior update puts
   them at the new location with prior-width covariance);
2. one responsibility pass over the frame in fixed-size batches through
   the evidence/responsibility graph;
3. the weighted-statistics graph per batch, accumulated into the global
   statistics; then a closed-form posterior update.

Both hot functions run through the interpreter, so a stored precision
map changes their numerics exactly as it would in deployment.  The
first frame always runs in float64: it seeds the priors, and a bad seed
placement is the one mistake the stream never gives back.  Ragged tail
batches (frame size not divisible by the batch size) also run in
float64, since maps are searched for the primary batch shape only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from ..formats import FORMATS, FP64, PrecisionFormat
from ..graph import Graph, PrecisionConfig, uniform_config
from ..interpreter import DEFAULT_COST_MODEL, MODES, CostModel, ExecutionProfile, execute
from ..search import PrecisionMapStaleError, load_map
from .graphs import build_elbo_graph, build_stats_graph, elbo_inputs, stats_inputs
from .model import (
    D,
    MixtureModel,
    Priors,
    SufficientStats,
    posterior_update,
)

__all__ = [
    "NumericsError",
    "TrainerConfig",
    "HotFunctions",
    "FrameMetrics",
    "TrainResult",
    "reassign_components",
    "frame_elbo",
    "fit_frame",
    "train",
    "train_scene",
]


class NumericsError(RuntimeError):
    """A hot-path run produced non-finite values during training."""


@dataclass(frozen=True)
class TrainerConfig:
    n_components: int = 512
    batch_size: int = 64
    n_reassign: int = 32
    temperature: float = 1.0
    seed: int = 0
    mode: str = MODES[0]
    # Homogeneous run: every compute node of both hot functions in this
    # format (no precision maps).  None means float64 unless maps apply.
    uniform_format: str | None = None
    # The first frame seeds the priors; keep it in float64 regardless of maps.
    first_frame_full_precision: bool = True

    def __post_init__(self):
        if self.n_components < 1 or self.batch_size < 1:
            raise ValueError("n_components and batch_size must be positive")
        if self.n_reassign < 0 or self.n_reassign > self.n_components:
            raise ValueError("n_reassign must be in [0, n_components]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.uniform_format is not None and self.uniform_format not in FORMATS:
            raise ValueError(f"unknown format {self.uniform_format!r}")


class HotFunctions:
    """Graph cache plus precision policy for the two training hot functions.

    Graphs are keyed by (kind, batch size).  Supplied precision maps are
    matched to the primary-batch graphs by fingerprint at construction
    time; a map that matches neither hot function is stale and rejected
    immediately rather than silently ignored.  A map path that does not
    exist falls back to the built-in default (uniform float64) and is
    listed in ``missing``.
    """

    def __init__(
        self,
        n_components: int,
        batch_size: int,
        mode: str = MODES[0],
        map_paths: Iterable[str] = (),
        cost_model: CostModel = DEFAULT_COST_MODEL,
        default_format: PrecisionFormat = FP64,
    ):
        self.n_components = int(n_components)
        self.batch_size = int(batch_size)
        self.mode = mode
        self.cost_model = cost_model
        self.default_format = default_format
        self._graphs: dict[tuple[str, int], Graph] = {}
        self._configs: dict[tuple[str, int], PrecisionConfig] = {}
        self._uniform: dict[tuple[str, int, str], PrecisionConfig] = {}
        self.missing: list[str] = []

        primary = [(kind, self.graph(kind, self.batch_size)) for kind in ("elbo", "stats")]
        for path in map_paths:
            self._attach_map(path, primary)

    def _attach_map(self, path, primary) -> None:
        stale = None
        for kind, g in primary:
            try:
                cfg = load_map(path, g)
            except FileNotFoundError:
                self.missing.append(str(path))
                return
            except PrecisionMapStaleError as exc:
                # Stale for this graph; it may still match the other one.
                stale = exc
                continue
            self._configs[(kind, self.batch_size)] = cfg
            return
        raise stale

    def graph(self, kind: str, batch: int) -> Graph:
        key = (kind, batch)
        if key not in self._graphs:
            build = build_elbo_graph if kind == "elbo" else build_stats_graph
            self._graphs[key] = build(batch, self.n_components)
        return self._graphs[key]

    def config(self, kind: str, batch: int, force_fp64: bool = False) -> PrecisionConfig:
        key = (kind, batch)
        if not force_fp64 and key in self._configs:
            return self._configs[key]
        # Ragged-tail and forced runs use float64, everything else the default.
        fmt = FP64 if force_fp64 or batch != self.batch_size else self.default_format
        ukey = (kind, batch, fmt.name)
        if ukey not in self._uniform:
            self._uniform[ukey] = uniform_config(self.graph(kind, batch), fmt)
        return self._uniform[ukey]

    @property
    def mapped_kinds(self) -> tuple[str, ...]:
        return tuple(sorted(kind for kind, _ in self._configs))

    def run(self, kind: str, batch: int, feed, force_fp64: bool = False):
        g = self.graph(kind, batch)
        cfg = self.config(kind, batch, force_fp64)
        return execute(g, feed, cfg, mode=self.mode, cost_model=self.cost_model)


def _as_frame(frame) -> np.ndarray:
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != 2 * D:
        raise ValueError(f"expected a (P, {2 * D}) frame, got {f.shape}")
    return f


def _batches(frame: np.ndarray, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Full batches first, then the ragged tail (if any)."""
    p = frame.shape[0]
    for start in range(0, p - p % batch_size, batch_size):
        chunk = frame[start : start + batch_size]
        yield chunk[:, :D], chunk[:, D:]
    if p % batch_size:
        tail = frame[p - p % batch_size :]
        yield tail[:, :D], tail[:, D:]


def _require_finite(arrays, kind: str, frame_index: int) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericsError(
                f"frame {frame_index}: {kind} outputs went non-finite; "
                "the precision assignment is too aggressive for this data"
            )


def reassign_components(
    priors: Priors,
    stats: SufficientStats,
    frame: np.ndarray,
    elbo: np.ndarray,
    n_reassign: int,
    temperature: float,
    rng: np.random.Generator,
) -> tuple[Priors, np.ndarray]:
    """Re-seed the weakest components at the worst-explained frame points.

    Target points are drawn without replacement with probability
    softmax(-elbo / temperature).  The chosen components' statistic rows
    are cleared in place; returns new priors (mean arrays copied) and
    the reassigned component ids.
    """
    frame = _as_frame(frame)
    k = min(int(n_reassign), frame.shape[0], priors.n_components)
    if k <= 0:
        return priors, np.empty(0, dtype=int)
    comps = np.argsort(stats.n_count, kind="stable")[:k]
    z = -np.asarray(elbo, dtype=np.float64) / float(temperature)
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    picks = rng.choice(frame.shape[0], size=k, replace=False, p=p)

    m0_space = priors.m0_space.copy()
    m0_color = priors.m0_color.copy()
    m0_space[comps] = frame[picks, :D]
    m0_color[comps] = frame[picks, D:]
    stats.n_count[comps] = 0.0
    stats.space_first[comps] = 0.0
    stats.color_first[comps] = 0.0
    stats.space_second[comps] = 0.0
    stats.color_second[comps] = 0.0
    return replace(priors, m0_space=m0_space, m0_color=m0_color), comps


def frame_elbo(
    hot: HotFunctions,
    model: MixtureModel,
    frame: np.ndarray,
    frame_index: int = 0,
    force_fp64: bool = False,
) -> tuple[np.ndarray, list[ExecutionProfile]]:
    """Per-point evidence values for a whole frame, batched through the graph."""
    frame = _as_frame(frame)
    pieces, profiles = [], []
    for bs, bc in _batches(frame, hot.batch_size):
        tail = bs.shape[0] != hot.batch_size
        outs, prof = hot.run("elbo", bs.shape[0], elbo_inputs(model, bs, bc), force_fp64 or tail)
        _require_finite(outs[:1], "evidence", frame_index)
        pieces.append(outs[0])
        profiles.append(prof)
    return np.concatenate(pieces), profiles


def _stats_delta(outs) -> SufficientStats:
    count, space_first, color_first, space_second, color_second = outs
    n = space_first.shape[0]
    return SufficientStats(
        n_count=count[:, 0].copy(),
        space_first=space_first.copy(),
        color_first=color_first.copy(),
        space_second=space_second.reshape(n, D, D).copy(),
        color_second=color_second.reshape(n, D, D).copy(),
    )


def fit_frame(
    hot: HotFunctions,
    model: MixtureModel,
    priors: Priors,
    stats: SufficientStats,
    frame: np.ndarray,
    frame_index: int = 0,
    force_fp64: bool = False,
) -> tuple[MixtureModel, dict[str, list[ExecutionProfile]], float]:
    """One responsibility + statistics pass, then the posterior update.

    All batches use the same incoming model (one coordinate-ascent step
    per frame); the statistics accumulate into ``stats`` in place.
    Returns the updated model, per-kind execution profiles, and the mean
    per-point evidence of the frame.
    """
    frame = _as_frame(frame)
    profiles: dict[str, list[ExecutionProfile]] = {"elbo": [], "stats": []}
    elbo_sum, n_points = 0.0, 0
    for bs, bc in _batches(frame, hot.batch_size):
        b = bs.shape[0]
        force = force_fp64 or b != hot.batch_size
        outs, prof = hot.run("elbo", b, elbo_inputs(model, bs, bc), force)
        _require_finite(outs, "evidence", frame_index)
        profiles["elbo"].append(prof)
        elbo_vals, resp = outs
        elbo_sum += float(elbo_vals.sum())
        n_points += b

        souts, sprof = hot.run("stats", b, stats_inputs(resp, bs, bc), force)
        _require_finite(souts, "statistics", frame_index)
        profiles["stats"].append(sprof)
        stats.add(_stats_delta(souts))
    return posterior_update(priors, stats), profiles, elbo_sum / max(n_points, 1)


@dataclass(frozen=True)
class FrameMetrics:
    frame: int
    psnr_mean: float
    psnr_ci95: float
    seconds: float
    peak_bytes: int
    elbo_seconds: float
    stats_seconds: float
    other_seconds: float
    elbo_mean: float

    def as_row(self) -> dict:
        return {
            "frame": self.frame,
            "psnr_mean": self.psnr_mean,
            "psnr_ci95": self.psnr_ci95,
            "seconds": self.seconds,
            "peak_bytes": self.peak_bytes,
        }


@dataclass
class TrainResult:
    model: MixtureModel
    priors: Priors
    stats: SufficientStats
    metrics: list[FrameMetrics]
    frames_seen: int


def train(
    frames: Iterable[np.ndarray],
    config: TrainerConfig,
    map_paths: Iterable[str] = (),
    evaluator: Callable[[MixtureModel], object] | None = None,
    cost_model: CostModel = DEFAULT_COST_MODEL,
    on_frame: Callable[[FrameMetrics], None] | None = None,
) -> TrainResult:
    """Consume a frame stream once and return the final model and metrics.

    ``frames`` may be any iterable of (P, 6) arrays; it is read a single
    time, in order.  ``evaluator`` (model -> object with ``psnr_mean``
    and ``psnr_ci95``) runs after each frame's update, outside the timed
    section.  ``on_frame`` observes each metrics row as it is produced.
    """
    default_fmt = FORMATS[config.uniform_format] if config.uniform_format else FP64
    if config.uniform_format and tuple(map_paths):
        raise ValueError("uniform_format and precision maps are mutually exclusive")
    hot = HotFunctions(
        config.n_components,
        config.batch_size,
        config.mode,
        map_paths,
        cost_model,
        default_format=default_fmt,
    )
    model: MixtureModel | None = None
    priors: Priors | None = None
    stats: SufficientStats | None = None
    metrics: list[FrameMetrics] = []

    i = -1
    for i, raw in enumerate(frames):
        t0 = time.perf_counter()
        frame = _as_frame(raw)
        force64 = i == 0 and config.first_frame_full_precision
        profiles: dict[str, list[ExecutionProfile]] = {"elbo": [], "stats": []}

        if i == 0:
            priors = Priors.from_frame(
                frame, config.n_components, np.random.default_rng([config.seed, 0])
            )
            stats = SufficientStats.zeros(config.n_components)
            model = posterior_update(priors, stats)
        else:
            # Prior means track the posterior: each frame's
            # responsibilities are computed against this snapshot.
            priors = replace(
                priors,
                m0_space=model.space.mean.copy(),
                m0_color=model.color.mean.copy(),
            )
            if config.n_reassign > 0:
                elbo, eprofs = frame_elbo(hot, model, frame, i, force64)
                profiles["elbo"].extend(eprofs)
                priors, _ = reassign_components(
                    priors,
                    stats,
                    frame,
                    elbo,
                    config.n_reassign,
                    config.temperature,
                    np.random.default_rng([config.seed, i]),
                )
            model = posterior_update(priors, stats)

        model, fit_profiles, elbo_mean = fit_frame(hot, model, priors, stats, frame, i, force64)
        profiles["elbo"].extend(fit_profiles["elbo"])
        profiles["stats"].extend(fit_profiles["stats"])
        seconds = time.perf_counter() - t0

        elbo_s = sum(p.wall_seconds for p in profiles["elbo"])
        stats_s = sum(p.wall_seconds for p in profiles["stats"])
        peak = max(p.peak_live_bytes for ps in profiles.values() for p in ps)
        psnr_mean = psnr_ci = float("nan")
        if evaluator is not None:
            scored = evaluator(model)
            psnr_mean = float(scored.psnr_mean)
            psnr_ci = float(scored.psnr_ci95)
        row = FrameMetrics(
            frame=i,
            psnr_mean=psnr_mean,
            psnr_ci95=psnr_ci,
            seconds=seconds,
            peak_bytes=peak,
            elbo_seconds=elbo_s,
            stats_seconds=stats_s,
            other_seconds=max(seconds - elbo_s - stats_s, 0.0),
            elbo_mean=elbo_mean,
        )
        metrics.append(row)
        if on_frame is not None:
            on_frame(row)

    if model is None:
        raise ValueError("empty frame stream")
    return TrainResult(model=model, priors=priors, stats=stats, metrics=metrics, frames_seen=i + 1)


def train_scene(
    spec,
    config: TrainerConfig,
    map_paths: Iterable[str] = (),
    eval_queries: int = 2048,
    cost_model: CostModel = DEFAULT_COST_MODEL,
    on_frame: Callable[[FrameMetrics], None] | None = None,
):
    """Train on a synthetic scene and score PSNR on its held-out queries.

    Returns (result, eval_set).  Imported lazily to keep the scene layer
    optional for users who feed their own frame streams.
    """
    from ..scene import evaluate, frame_stream, make_eval_set

    eval_set = make_eval_set(spec, eval_queries)
    result = train(
        frame_stream(spec),
        config,
        map_paths=map_paths,
        evaluator=lambda m: evaluate(m, eval_set),
        cost_model=cost_model,
        on_frame=on_frame,
    )
    return result, eval_set
