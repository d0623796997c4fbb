"""Command-line surface: profile, search, train, eval, and sweep.

Every command writes into a single output directory: a ``manifest.json``
capturing the full configuration, seeds, and library versions (enough
to reproduce the deterministic outputs byte for byte), plus its own
reports, traces, metrics, maps, or checkpoints.

Exit codes: 0 success; 2 configuration error (bad flags, malformed
files, missing inputs); 3 numerical failure (divergence, infeasible
tolerance, broken posterior); 4 stale precision map.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .formats import FORMAT_ORDER, FORMATS, FP64
from .graph import GraphError, uniform_config
from .interpreter import DEFAULT_COST_MODEL, MODES, CostModel, execute, modeled_cost_of
from .scene import SceneSpec, evaluate, frame_points, make_eval_set
from .search import (
    DEFAULT_TAU,
    InfeasibleError,
    PrecisionMapFormatError,
    PrecisionMapStaleError,
    save_map,
    search,
)
from .vbmix.graphs import build_elbo_graph, build_stats_graph, probe_inputs, stats_inputs, elbo_inputs
from .vbmix.model import ModelUpdateError, model_from_dict, model_to_dict, posterior_update
from .vbmix.train import (
    HotFunctions,
    NumericsError,
    TrainerConfig,
    fit_frame,
    frame_elbo,
    reassign_components,
    train,
    train_scene,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICS = 3
EXIT_STALE_MAP = 4

METRICS_FIELDS = ("frame", "psnr_mean", "psnr_ci95", "seconds", "peak_bytes")


class ConfigError(RuntimeError):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "mixprec": __version__,
    }


def _manifest(out: Path, command: str, config: dict) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "versions": _versions(),
    })


def _scene_from_args(args) -> tuple[SceneSpec, dict]:
    """Scene from a JSON spec file or inline flags; flags win."""
    base: dict = {}
    if args.scene and (args.scene.endswith(".json") or Path(args.scene).exists()):
        try:
            base = json.loads(Path(args.scene).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"scene spec {args.scene}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError(f"scene spec {args.scene}: expected a JSON object")
    elif args.scene:
        base = {"family": args.scene}
    overrides = {
        "seed": args.scene_seed,
        "n_frames": args.frames,
        "points_per_frame": args.points,
        "extent": args.extent,
        "overlap": args.overlap,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    fallbacks = {
        "n_frames": getattr(args, "_frames_fallback", None),
        "points_per_frame": getattr(args, "_points_fallback", None),
    }
    for k, v in fallbacks.items():
        if v is not None:
            base.setdefault(k, v)
    base = {k: tuple(v) if isinstance(v, list) else v for k, v in base.items()}
    try:
        spec = SceneSpec(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scene spec: {exc}") from exc
    cfg = dict(spec.__dict__)
    return spec, cfg


def _trainer_from_args(args) -> TrainerConfig:
    try:
        return TrainerConfig(
            n_components=args.components,
            batch_size=args.batch_size,
            n_reassign=args.reassign,
            temperature=args.temperature,
            seed=args.seed,
            mode=args.mode,
            uniform_format=getattr(args, "format", None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _check_maps_exist(paths) -> list[str]:
    missing = [p for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"precision map file(s) not found: {', '.join(missing)}")
    return list(paths)


def _cost_model_from_args(args) -> CostModel:
    if not getattr(args, "weights", None):
        return DEFAULT_COST_MODEL
    weights = dict(DEFAULT_COST_MODEL.weights)
    cast_weight = DEFAULT_COST_MODEL.cast_weight
    try:
        for part in args.weights.split(","):
            key, val = part.split("=")
            key = key.strip()
            if key == "cast":
                cast_weight = float(val)
            elif key in FORMATS:
                weights[key] = float(val)
            else:
                raise ConfigError(f"unknown cost weight {key!r}")
        return CostModel(weights=weights, cast_weight=cast_weight)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad --weights: {exc}") from exc


def _write_metrics(path: Path, rows: list[dict], append: bool = False) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with path.open("a" if not fresh else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, extrasaction="ignore")
        if fresh:
            w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in METRICS_FIELDS})


def _write_trace(path: Path, profile) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_rel", "node", "event", "live_bytes_after"])
        for t_rel, node, event, live in profile.memory_trace:
            w.writerow([f"{t_rel:.9f}", node, event, live])


# ---------------------------------------------------------------- profile


def cmd_profile(args) -> int:
    out = Path(args.out)
    spec, scene_cfg = _scene_from_args(args)
    if spec.n_frames < 2:
        raise ConfigError("profile needs a scene with at least 2 frames")
    tcfg = _trainer_from_args(args)
    maps = _check_maps_exist(args.map)
    cost_model = _cost_model_from_args(args)
    _manifest(out, "profile", {
        "scene": scene_cfg,
        "trainer": {**tcfg.__dict__},
        "maps": maps,
        "weights": cost_model.__dict__,
    })

    hot = HotFunctions(tcfg.n_components, tcfg.batch_size, tcfg.mode, maps, cost_model,
                       default_format=FORMATS[tcfg.uniform_format] if tcfg.uniform_format else FP64)
    # Frame 0 seeds the model; the profiled iteration is frame 1.
    res = train(iter([frame_points(spec, 0)]), tcfg, map_paths=maps, cost_model=cost_model)
    model, priors, stats = res.model, res.priors, res.stats

    frame = frame_points(spec, 1)
    priors = replace(priors, m0_space=model.space.mean.copy(), m0_color=model.color.mean.copy())
    t0 = time.perf_counter()
    elbo, eprofs = frame_elbo(hot, model, frame, 1)
    priors, _ = reassign_components(priors, stats, frame, elbo, tcfg.n_reassign,
                                    tcfg.temperature, np.random.default_rng([tcfg.seed, 1]))
    model = posterior_update(priors, stats)
    model, fprofs, _ = fit_frame(hot, model, priors, stats, frame, 1)
    total = time.perf_counter() - t0

    elbo_s = sum(p.wall_seconds for p in eprofs) + sum(p.wall_seconds for p in fprofs["elbo"])
    stats_s = sum(p.wall_seconds for p in fprofs["stats"])
    other_s = max(total - elbo_s - stats_s, 0.0)
    pct = {k: 100.0 * v / total for k, v in
           (("elbo", elbo_s), ("stats", stats_s), ("other", other_s))}

    # Mode comparison on one representative batch of the statistics
    # reduction: identical numbers, very different live-memory peaks.
    bs, bc = frame[: tcfg.batch_size, :3], frame[: tcfg.batch_size, 3:]
    (eout, _) = hot.run("elbo", tcfg.batch_size, elbo_inputs(model, bs, bc))
    feed = stats_inputs(eout[1], bs, bc)
    g = hot.graph("stats", tcfg.batch_size)
    cfg = hot.config("stats", tcfg.batch_size)
    outs = {}
    peaks = {}
    for mode in MODES:
        o, prof = execute(g, feed, cfg, mode=mode, cost_model=cost_model)
        outs[mode] = o
        peaks[mode] = prof.peak_live_bytes
        _write_trace(out / f"trace_stats_{mode}.csv", prof)
    _, eprof = execute(hot.graph("elbo", tcfg.batch_size), elbo_inputs(model, bs, bc),
                       hot.config("elbo", tcfg.batch_size), mode=tcfg.mode, cost_model=cost_model)
    _write_trace(out / "trace_elbo.csv", eprof)

    fused, baseline = outs[MODES[0]], outs[MODES[1]]
    rel = 0.0
    for a, b in zip(fused, baseline):
        denom = np.maximum(np.abs(b), 1e-300)
        rel = max(rel, float(np.max(np.abs(a - b) / denom)))
    report = {
        "seconds_total": total,
        "seconds": {"elbo": elbo_s, "stats": stats_s, "other": other_s},
        "percent": pct,
        "percent_sum": sum(pct.values()),
        "peak_live_bytes": {m: peaks[m] for m in MODES},
        "peak_gap_bytes": peaks[MODES[1]] - peaks[MODES[0]],
        "mode_equivalence_max_rel": rel,
        "mode_equivalent_1e9": rel <= 1e-9,
        "mapped_functions": list(hot.mapped_kinds),
    }
    _write_json(out / "profile.json", report)
    print(f"profile: total {total:.3f}s | elbo {pct['elbo']:.1f}% "
          f"stats {pct['stats']:.1f}% other {pct['other']:.1f}%")
    print(f"stats peak fused {peaks[MODES[0]]} vs baseline {peaks[MODES[1]]} "
          f"(gap {report['peak_gap_bytes']} bytes)")
    print(f"fused/baseline max rel diff {rel:.3e}")
    return EXIT_OK


# ----------------------------------------------------------------- search


def _run_search(graph, kind, args, cost_model, probe_seed):
    probes = probe_inputs(kind, args.batch_size, args.components, probe_seed)
    formats = tuple(FORMATS[f] for f in args.formats.split(","))
    return search(
        graph,
        probes,
        epsilon=args.epsilon,
        tau=args.tau,
        formats=formats,
        mode=args.mode,
        cost_model=cost_model,
        cost_source=args.cost_source,
        probe_seed=probe_seed,
    )


def cmd_search(args) -> int:
    out = Path(args.out)
    cost_model = _cost_model_from_args(args)
    for f in args.formats.split(","):
        if f not in FORMATS:
            raise ConfigError(f"unknown format {f!r} in --formats")
    _manifest(out, "search", {
        "function": args.function,
        "components": args.components,
        "batch_size": args.batch_size,
        "epsilon": args.epsilon,
        "tau": args.tau,
        "formats": args.formats,
        "mode": args.mode,
        "cost_source": args.cost_source,
        "probe_seed": args.probe_seed,
        "check_seed": args.check_seed,
        "weights": cost_model.__dict__,
    })
    build = build_elbo_graph if args.function == "elbo" else build_stats_graph
    graph = build(args.batch_size, args.components)

    result = _run_search(graph, args.function, args, cost_model, args.probe_seed)
    map_path = out / f"map_{args.function}.json"
    save_map(map_path, result)
    report = dict(result.report)

    if args.check_seed is not None:
        second = _run_search(graph, args.function, args, cost_model, args.check_seed)
        a, b = result.config, second.config
        nodes = sorted(graph.compute_ids())
        disagreements = [
            {"node": nid, "name": graph.node(nid).name,
             "seed_a": a.fmt(nid).name, "seed_b": b.fmt(nid).name}
            for nid in nodes if a.fmt(nid).name != b.fmt(nid).name
        ]
        agreement = 1.0 - len(disagreements) / len(nodes)
        report["probe_agreement"] = {
            "seed_a": args.probe_seed,
            "seed_b": args.check_seed,
            "fraction": agreement,
            "exact": not disagreements,
            "disagreements": disagreements,
        }
        print(f"probe-seed agreement: {100*agreement:.1f}% "
              f"({len(nodes)-len(disagreements)}/{len(nodes)} nodes)"
              + (" exact" if not disagreements else ""))
    _write_json(out / f"search_{args.function}.json", report)
    counts = report["format_counts"]
    print(f"search {args.function}: err {report['error']:.3e} <= {args.epsilon:.1e}, "
          f"modeled cost ratio {report['modeled_cost_ratio']:.4f}, formats {counts}")
    print(f"map written to {map_path}")
    return EXIT_OK


# ------------------------------------------------------------ train / eval


def cmd_train(args) -> int:
    out = Path(args.out)
    spec, scene_cfg = _scene_from_args(args)
    tcfg = _trainer_from_args(args)
    maps = _check_maps_exist(args.map)
    cost_model = _cost_model_from_args(args)
    _manifest(out, "train", {
        "scene": scene_cfg,
        "trainer": {**tcfg.__dict__},
        "maps": maps,
        "eval_queries": args.eval_queries,
        "weights": cost_model.__dict__,
    })

    rows: list[dict] = []

    def on_frame(m):
        rows.append(m.__dict__)
        print(f"frame {m.frame:3d}  psnr {m.psnr_mean:7.3f} +- {m.psnr_ci95:5.3f}  "
              f"{m.seconds:6.2f}s  peak {m.peak_bytes}")

    divergence = None
    try:
        result, _ = train_scene(spec, tcfg, map_paths=maps,
                                eval_queries=args.eval_queries,
                                cost_model=cost_model, on_frame=on_frame)
    except NumericsError as exc:
        divergence = str(exc)
        result = None
    finally:
        _write_metrics(out / "metrics.csv", rows)

    report = {
        "frames_completed": len(rows),
        "divergence": divergence,
        "final_psnr_mean": rows[-1]["psnr_mean"] if rows else None,
        "seconds": {
            "elbo": sum(r["elbo_seconds"] for r in rows),
            "stats": sum(r["stats_seconds"] for r in rows),
            "other": sum(r["other_seconds"] for r in rows),
        },
        "maps": maps,
    }
    _write_json(out / "train.json", report)
    if divergence is not None:
        print(f"training diverged: {divergence}", file=sys.stderr)
        return EXIT_NUMERICS
    doc = model_to_dict(result.model, result.priors, result.frames_seen)
    _write_json(out / "model.json", doc)
    print(f"final psnr {rows[-1]['psnr_mean']:.3f} dB over {len(rows)} frames; "
          f"checkpoint {out/'model.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = Path(args.out)
    spec, scene_cfg = _scene_from_args(args)
    try:
        doc = json.loads(Path(args.model).read_text())
        model, _, frames_seen = model_from_dict(doc)
    except FileNotFoundError as exc:
        raise ConfigError(f"model checkpoint not found: {args.model}") from exc
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad model checkpoint {args.model}: {exc}") from exc
    _manifest(out, "eval", {
        "scene": scene_cfg,
        "model": str(args.model),
        "eval_queries": args.eval_queries,
    })
    t0 = time.perf_counter()
    eval_set = make_eval_set(spec, args.eval_queries)
    scored = evaluate(model, eval_set)
    dt = time.perf_counter() - t0
    if np.isnan(scored.psnr_mean):
        # inf means an exact stratum, which is a success, not a failure
        print(f"eval produced nan psnr", file=sys.stderr)
        return EXIT_NUMERICS
    row = {"frame": frames_seen, "psnr_mean": scored.psnr_mean,
           "psnr_ci95": scored.psnr_ci95, "seconds": dt, "peak_bytes": 0}
    _write_metrics(out / "metrics.csv", [row], append=True)
    _write_json(out / "eval.json", {
        "psnr_mean": scored.psnr_mean,
        "psnr_ci95": scored.psnr_ci95,
        "psnr_overall": scored.psnr_overall,
        "queries": args.eval_queries,
        "frames_seen": frames_seen,
    })
    print(f"psnr {scored.psnr_mean:.3f} +- {scored.psnr_ci95:.3f} dB "
          f"(overall {scored.psnr_overall:.3f})")
    return EXIT_OK


# ------------------------------------------------------------------ sweep


def cmd_sweep(args) -> int:
    out = Path(args.out)
    spec, scene_cfg = _scene_from_args(args)
    tcfg = _trainer_from_args(args)
    cost_model = _cost_model_from_args(args)
    try:
        epsilons = [float(e) for e in args.epsilons.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --epsilons: {exc}") from exc
    if not epsilons:
        raise ConfigError("--epsilons must list at least one tolerance")
    _manifest(out, "sweep", {
        "scene": scene_cfg,
        "trainer": {**tcfg.__dict__},
        "epsilons": epsilons,
        "psnr_drop_threshold": args.psnr_drop,
        "probe_seed": args.probe_seed,
        "weights": cost_model.__dict__,
    })

    # All-fp64 reference trajectory and cost.
    ref, _ = train_scene(spec, tcfg, eval_queries=args.eval_queries, cost_model=cost_model)
    ref_psnr = ref.metrics[-1].psnr_mean
    graphs = {"elbo": build_elbo_graph(tcfg.batch_size, tcfg.n_components),
              "stats": build_stats_graph(tcfg.batch_size, tcfg.n_components)}
    fp64_cost = sum(
        modeled_cost_of(g, uniform_config(g, FP64), cost_model=cost_model)
        for g in graphs.values()
    )
    print(f"fp64 reference: psnr {ref_psnr:.3f} dB, modeled cost {fp64_cost:.0f}")

    rows = []
    for eps in epsilons:
        eps_dir = out / f"eps_{eps:g}"
        eps_dir.mkdir(parents=True, exist_ok=True)
        maps, cost_star, err_max, counts = [], 0.0, 0.0, {f: 0 for f in FORMAT_ORDER}
        for kind, g in graphs.items():
            probes = probe_inputs(kind, tcfg.batch_size, tcfg.n_components, args.probe_seed)
            r = search(g, probes, epsilon=eps, cost_model=cost_model,
                       mode=tcfg.mode, probe_seed=args.probe_seed)
            p = eps_dir / f"map_{kind}.json"
            save_map(p, r)
            maps.append(str(p))
            cost_star += r.report["modeled_cost_star"]
            err_max = max(err_max, r.report["error"])
            for fname, k in r.report["format_counts"].items():
                counts[fname] += k
        divergence = None
        try:
            res, _ = train_scene(spec, tcfg, map_paths=maps,
                                 eval_queries=args.eval_queries, cost_model=cost_model)
            psnr_final = res.metrics[-1].psnr_mean
        except NumericsError as exc:
            divergence = str(exc)
            psnr_final = float("nan")
        row = {
            "epsilon": eps,
            "error": err_max,
            "modeled_cost": cost_star,
            "cost_ratio": cost_star / fp64_cost,
            "psnr_final": psnr_final,
            "psnr_drop": ref_psnr - psnr_final,
            "downcast_nodes": sum(v for f, v in counts.items() if f != "fp64"),
            **{f"n_{f}": counts[f] for f in FORMAT_ORDER},
            "diverged": divergence is not None,
        }
        rows.append(row)
        print(f"eps {eps:g}: err {err_max:.2e}, cost ratio {row['cost_ratio']:.4f}, "
              f"psnr {psnr_final:.3f} (drop {row['psnr_drop']:+.3f}), "
              f"downcast {row['downcast_nodes']}"
              + (" DIVERGED" if divergence else ""))

    # The knee: best cost reduction whose quality stays within the band.
    eligible = [r for r in rows
                if not r["diverged"] and r["psnr_drop"] < args.psnr_drop]
    knee = min(eligible, key=lambda r: r["cost_ratio"])["epsilon"] if eligible else None
    for r in rows:
        r["knee"] = r["epsilon"] == knee

    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    _write_json(out / "sweep.json", {
        "fp64_psnr": ref_psnr,
        "fp64_modeled_cost": fp64_cost,
        "psnr_drop_threshold": args.psnr_drop,
        "knee_epsilon": knee,
        "rows": rows,
    })
    print(f"knee epsilon: {knee}")
    return EXIT_OK


# ------------------------------------------------------------------- main


def _add_scene_flags(p: argparse.ArgumentParser, frames_default=None, points_default=None):
    p.add_argument("--scene", default="corridor",
                   help="scene family name or path to a scene spec JSON")
    p.add_argument("--scene-seed", type=int, default=None, help="scene generator seed")
    p.add_argument("--frames", type=int, default=None,
                   help=f"number of frames (default {frames_default})")
    p.add_argument("--points", type=int, default=None,
                   help=f"points per frame (default {points_default})")
    p.add_argument("--extent", type=float, default=None, help="scene box side length")
    p.add_argument("--overlap", type=float, default=None, help="window overlap fraction")
    # Fallbacks rank below an explicit flag and below a JSON scene spec.
    p.set_defaults(_frames_fallback=frames_default, _points_fallback=points_default)


def _add_trainer_flags(p: argparse.ArgumentParser):
    p.add_argument("--components", type=int, default=512, help="mixture components N")
    p.add_argument("--batch-size", type=int, default=64, help="batch size B")
    p.add_argument("--reassign", type=int, default=32, help="components reassigned per frame")
    p.add_argument("--temperature", type=float, default=1.0, help="reassignment softmax temperature")
    p.add_argument("--seed", type=int, default=0, help="trainer seed")
    p.add_argument("--mode", choices=MODES, default=MODES[0], help="contraction execution mode")
    p.add_argument("--eval-queries", type=int, default=2048, help="held-out query count")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixprec",
                                 description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="one reassign+fit iteration with runtime and memory traces")
    _add_scene_flags(p, frames_default=2, points_default=2048)
    _add_trainer_flags(p)
    p.add_argument("--map", action="append", default=[], help="precision map file (repeatable)")
    p.add_argument("--format", choices=list(FORMAT_ORDER), default=None,
                   help="homogeneous format for every compute node")
    p.add_argument("--weights", default=None, help="cost weights, e.g. fp64=4,fp32=2,tf32=1.5,fp16=1,cast=0.5")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("search", help="mixed-precision search on a hot function; writes map + report")
    p.add_argument("--function", choices=("elbo", "stats"), required=True)
    p.add_argument("--components", type=int, default=512)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=1e-6, help="relative error tolerance")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="small-norm floor")
    p.add_argument("--formats", default=",".join(FORMAT_ORDER), help="comma list; must include fp64")
    p.add_argument("--mode", choices=MODES, default=MODES[0])
    p.add_argument("--cost-source", choices=("model", "wallclock"), default="model")
    p.add_argument("--probe-seed", type=int, default=12345)
    p.add_argument("--check-seed", type=int, default=None,
                   help="second probe seed; report assignment agreement")
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="replay-free training over a frame stream")
    _add_scene_flags(p, frames_default=50, points_default=2048)
    _add_trainer_flags(p)
    p.add_argument("--map", action="append", default=[], help="precision map file (repeatable)")
    p.add_argument("--format", choices=list(FORMAT_ORDER), default=None,
                   help="homogeneous format for every compute node")
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a scene's held-out queries")
    _add_scene_flags(p)
    p.add_argument("--model", required=True, help="model checkpoint JSON")
    p.add_argument("--eval-queries", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="tolerance sweep: search + short training per epsilon")
    _add_scene_flags(p, frames_default=12, points_default=1024)
    _add_trainer_flags(p)
    p.add_argument("--epsilons", default="1e-7,1e-6,1e-5,1e-4", help="comma list of tolerances")
    p.add_argument("--probe-seed", type=int, default=12345)
    p.add_argument("--psnr-drop", type=float, default=0.5,
                   help="max PSNR drop (dB) tolerated when picking the knee")
    p.add_argument("--weights", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PrecisionMapStaleError as exc:
        print(f"stale precision map: {exc}", file=sys.stderr)
        return EXIT_STALE_MAP
    except (NumericsError, ModelUpdateError, InfeasibleError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (ConfigError, PrecisionMapFormatError, GraphError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
