"""Search passes, error metric, and precision-map persistence."""

import json

import numpy as np
import pytest

from mixprec import (
    FP16,
    FP32,
    FP64,
    TF32,
    GraphBuilder,
    InfeasibleError,
    PrecisionMapFormatError,
    PrecisionMapStaleError,
    ProbeEvaluator,
    cast_regions,
    latency_pass,
    load_map,
    map_document,
    modeled_cost_of,
    precision_pass,
    read_map,
    relative_error,
    save_map,
    search,
    sensitivity_scan,
    structure_pass,
    uniform_config,
)

TWO_LEVELS = (FP16, FP64)


def cancel_graph():
    """o1 cancels a large constant; o2 is benign. fp16 wrecks only o1."""
    g = GraphBuilder("cancel")
    x = g.input("x", (16,))
    c = g.constant(np.full(16, 1.0e4))
    o1 = g.sub(g.add(x, c), c)
    o2 = g.neg(x)
    return g.build([o1, o2])


def chain_graph():
    g = GraphBuilder("chain")
    x = g.input("x", (32,))
    a = g.mul(x, g.constant(np.float64(3.0)))
    b = g.add(a, g.constant(np.float64(0.125)))
    c = g.mul(b, g.constant(np.float64(0.5)))
    return g.build([c])


def probe(shape, seed=0):
    return {"x": np.random.default_rng(seed).standard_normal(shape)}


class TestRelativeError:
    def test_hand_examples_exact(self):
        assert relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
        assert relative_error(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 1.0
        assert relative_error(
            np.array([0.0, 0.0]), np.array([1e-13, 0.0]), tau=1e-12
        ) == pytest.approx(0.1, abs=0.0)

    def test_multi_output_concatenation(self):
        ref = [np.array([3.0]), np.array([4.0])]
        cand = [np.array([3.0]), np.array([0.0])]
        assert relative_error(ref, cand) == 4.0 / 5.0

    def test_non_finite_candidate_is_inf(self):
        ref = np.array([1.0, 2.0])
        assert relative_error(ref, np.array([1.0, np.inf])) == np.inf
        assert relative_error(ref, np.array([np.nan, 2.0])) == np.inf

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            relative_error(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            relative_error([np.zeros(3)], [np.zeros(3), np.zeros(3)])

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            relative_error(np.zeros(2), np.zeros(2), tau=0.0)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(50), rng.standard_normal(50)
        assert relative_error(a, b) == pytest.approx(relative_error(a * 1e6, b * 1e6))


class TestSensitivityScan:
    def test_cancellation_scores_highest(self):
        g = cancel_graph()
        table = sensitivity_scan(g, probe(16), formats=TWO_LEVELS)
        add_id, sub_id, neg_id = g.compute_ids()
        assert table.score(add_id, "fp16") > table.score(neg_id, "fp16")
        for nid in g.compute_ids():
            assert table.score(nid, "fp64") == 0.0

    def test_one_run_per_node_and_format(self):
        g = cancel_graph()
        ev = ProbeEvaluator(g, probe(16))
        sensitivity_scan(g, probe(16), evaluator=ev)
        # 3 compute nodes x 3 reduced formats, nothing else.
        assert ev.evaluations == 9

    def test_wider_format_never_scores_worse(self):
        g = chain_graph()
        table = sensitivity_scan(g, probe(32))
        for nid in g.compute_ids():
            assert table.score(nid, "fp32") <= table.score(nid, "fp16") + 1e-15


class TestProbeEvaluator:
    def test_caches_repeat_configs(self):
        g = chain_graph()
        ev = ProbeEvaluator(g, probe(32))
        cfg = uniform_config(g, FP16)
        e1 = ev.error_of(cfg)
        e2 = ev.error_of(cfg)
        assert e1 == e2
        assert ev.evaluations == 1

    def test_reference_error_is_zero(self):
        g = chain_graph()
        ev = ProbeEvaluator(g, probe(32))
        assert ev.error_of(uniform_config(g, FP64)) == 0.0


class TestPrecisionPass:
    def test_loose_bound_keeps_everything_low(self):
        g = chain_graph()
        cfg, history = precision_pass(g, probe(32), epsilon=0.5, formats=TWO_LEVELS)
        assert cfg.counts() == {"fp16": 3}
        assert history[0]["promoted"] == []

    def test_zero_epsilon_forces_fp64(self):
        g = chain_graph()
        cfg, _ = precision_pass(g, probe(32), epsilon=0.0, formats=TWO_LEVELS)
        assert cfg.counts() == {"fp64": 3}

    def test_bound_respected_at_every_epsilon(self):
        g = cancel_graph()
        ev = ProbeEvaluator(g, probe(16))
        for eps in (1e-1, 1e-3, 1e-6, 1e-9):
            cfg, _ = precision_pass(g, probe(16), epsilon=eps, evaluator=ev)
            assert ev.error_of(cfg) <= eps

    def test_refine_stages_cover_intermediate_formats(self):
        g = cancel_graph()
        _, history = precision_pass(g, probe(16), epsilon=1e-6)
        stages = [(h["stage"], h["format"]) for h in history]
        assert stages == [("promote", "fp16"), ("refine", "tf32"), ("refine", "fp32")]

    def test_negative_epsilon_rejected(self):
        g = chain_graph()
        with pytest.raises(ValueError):
            precision_pass(g, probe(32), epsilon=-1e-9)


class TestStructurePass:
    def test_only_lowers_and_respects_bound(self):
        g = cancel_graph()
        eps = 1e-6
        ev = ProbeEvaluator(g, probe(16))
        start, _ = precision_pass(g, probe(16), epsilon=eps, evaluator=ev)
        out, history = structure_pass(g, probe(16), eps, start, evaluator=ev)
        for nid in g.compute_ids():
            assert out.fmt(nid).level <= start.fmt(nid).level
        assert ev.error_of(out) <= eps
        for step in history:
            assert step["accepted"] == (step["error"] <= eps)

    def test_accepted_steps_are_single_level_drops(self):
        g = chain_graph()
        eps = 1e-2
        start = uniform_config(g, FP64)
        out, history = structure_pass(g, probe(32), eps, start)
        # All-fp64 has no seeds: nothing may change without a seed.
        assert out.key() == start.key()
        assert history == []


class TestCastRegions:
    def test_single_region_with_boundary_bytes(self):
        g = chain_graph()
        a, b, c = g.compute_ids()
        cfg = uniform_config(g, FP64).with_nodes({a: FP32, b: FP32})
        regions = cast_regions(g, cfg)
        assert len(regions) == 1
        region = regions[0]
        assert region.nodes == (a, b)
        assert region.fmt == "fp32"
        # Boundary: x and two scalar constants in at fp32, b's output out
        # to the fp64 consumer c.
        assert region.boundary_cast_bytes == 32 * 4 + 4 + 4 + 32 * 8

    def test_distinct_formats_split_regions(self):
        g = chain_graph()
        a, b, c = g.compute_ids()
        cfg = uniform_config(g, FP64).with_nodes({a: FP16, b: FP32})
        regions = cast_regions(g, cfg)
        assert [(r.nodes, r.fmt) for r in regions] == [((a,), "fp16"), ((b,), "fp32")]

    def test_all_fp64_has_no_regions(self):
        g = chain_graph()
        assert cast_regions(g, uniform_config(g, FP64)) == []


class TestLatencyPass:
    def test_unprofitable_region_reverted(self):
        # A tf32 reduction over an fp32-resident operand: matching the
        # producer's format removes the whole cast boundary and costs less
        # than the tf32 work saved, so the region must be raised once and
        # then kept at fp32.
        g = GraphBuilder("island")
        x = g.input("x", (8192,), fmt=FP32)
        built = g.build([g.reduce_sum(x, axes=(0,))])
        nid = built.compute_ids()[0]
        cfg = uniform_config(built, FP64).with_nodes({nid: TF32})
        final, history = latency_pass(built, probe(8192), cfg, epsilon=1.0)
        assert final.counts() == {"fp32": 1}
        assert [(h["format"], h["action"]) for h in history] == [
            ("tf32", "reverted"),
            ("fp32", "kept"),
        ]
        assert modeled_cost_of(built, final) < modeled_cost_of(built, cfg)

    def test_fp16_island_is_model_profitable(self):
        # Raising fp16 one level to tf32 widens the inbound cast (2 to 4
        # bytes per element) while the work gets pricier: the model keeps
        # the island even though both neighbors run fp64.
        g = GraphBuilder("tiny-island")
        x = g.input("x", (4096,))
        mid = g.neg(x)
        out = g.exp(mid)
        built = g.build([out])
        neg_id, _ = built.compute_ids()
        cfg = uniform_config(built, FP64).with_nodes({neg_id: FP16})
        final, history = latency_pass(built, probe(4096), cfg, epsilon=1.0)
        assert final.key() == cfg.key()
        assert [h["action"] for h in history] == ["kept"]

    def test_profitable_region_kept(self):
        # A heavy contraction at fp32 amortizes its boundary casts.
        g = GraphBuilder("heavy")
        a = g.input("a", (64, 64))
        b = g.input("b", (64, 64))
        mm = g.contract(a, b, contract=((1,), (0,)))
        built = g.build([mm])
        cfg = uniform_config(built, FP32)
        rng = np.random.default_rng(2)
        ins = {"a": rng.standard_normal((64, 64)), "b": rng.standard_normal((64, 64))}
        final, history = latency_pass(built, ins, cfg, epsilon=1.0)
        assert final.key() == cfg.key()
        assert [h["action"] for h in history] == ["kept"]

    def test_bad_cost_source(self):
        g = chain_graph()
        with pytest.raises(ValueError):
            latency_pass(g, probe(32), uniform_config(g, FP64), epsilon=1.0, cost_source="oracle")


class TestSearchEndToEnd:
    def test_feasible_and_no_worse_than_fp64(self):
        g = cancel_graph()
        res = search(g, probe(16), epsilon=1e-6)
        r = res.report
        assert r["error"] <= 1e-6
        assert r["modeled_cost_star"] <= r["modeled_cost_high"]
        assert set(map(int, r["assignment"])) == set(g.compute_ids())
        assert sum(r["format_counts"].values()) == len(g.compute_ids())
        assert r["graph_fingerprint"] == g.fingerprint

    def test_loose_bound_reduces_cost(self):
        g = GraphBuilder("bulk")
        a = g.input("a", (48, 48))
        b = g.input("b", (48, 48))
        g2 = g.contract(a, b, contract=((1,), (0,)))
        built = g.build([g.add(g2, g.constant(np.float64(1.0)))])
        rng = np.random.default_rng(3)
        ins = {"a": rng.standard_normal((48, 48)), "b": rng.standard_normal((48, 48))}
        res = search(built, ins, epsilon=1e-3)
        assert res.report["modeled_cost_ratio"] < 1.0
        assert res.report["error"] <= 1e-3

    def test_infeasible_epsilon_never_happens_with_fp64(self):
        # epsilon 0 is satisfiable exactly by the all-fp64 assignment.
        g = cancel_graph()
        res = search(g, probe(16), epsilon=0.0)
        assert res.report["error"] == 0.0
        assert res.config.counts() == {"fp64": 3}


class TestMapPersistence:
    def test_round_trip(self, tmp_path):
        g = cancel_graph()
        res = search(g, probe(16), epsilon=1e-6)
        path = tmp_path / "map.json"
        save_map(path, res)
        loaded = load_map(path, g)
        assert loaded.key() == res.config.key()

    def test_byte_identical_rewrite(self, tmp_path):
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_map(p1, doc)
        save_map(p2, map_document(uniform_config(g, FP32), g, epsilon=1e-6))
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.read_bytes().endswith(b"\n")

    def test_stale_fingerprint_rejected(self, tmp_path):
        g = chain_graph()
        path = tmp_path / "map.json"
        save_map(path, map_document(uniform_config(g, FP32), g, epsilon=1e-6))

        g2 = GraphBuilder("chain")  # same name, different constant
        x = g2.input("x", (32,))
        a = g2.mul(x, g2.constant(np.float64(4.0)))
        b = g2.add(a, g2.constant(np.float64(0.125)))
        changed = g2.build([g2.mul(b, g2.constant(np.float64(0.5)))])
        with pytest.raises(PrecisionMapStaleError, match="fingerprint"):
            load_map(path, changed)

    def test_malformed_json_rejected(self, tmp_path):
        path = tmp_path / "map.json"
        path.write_text("{not json")
        with pytest.raises(PrecisionMapFormatError):
            read_map(path)
        with pytest.raises(PrecisionMapFormatError):
            load_map(path, chain_graph())

    def test_wrong_schema_version(self, tmp_path):
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        doc["schema_version"] = 99
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(PrecisionMapFormatError, match="schema_version"):
            read_map(path)

    def test_missing_fields(self, tmp_path):
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        del doc["assignment"]
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(PrecisionMapFormatError, match="missing"):
            read_map(path)

    def test_unknown_format_name(self, tmp_path):
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        first = next(iter(doc["assignment"]))
        doc["assignment"][first] = "bf16"
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(PrecisionMapFormatError, match="format"):
            load_map(path, g)

    def test_incomplete_assignment(self, tmp_path):
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        first = next(iter(doc["assignment"]))
        del doc["assignment"][first]
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(PrecisionMapFormatError):
            load_map(path, g)

    def test_stale_beats_incomplete(self, tmp_path):
        # Fingerprint is checked first: a stale map reports staleness even
        # if its assignment also happens to be malformed.
        g = chain_graph()
        doc = map_document(uniform_config(g, FP32), g, epsilon=1e-6)
        doc["graph_fingerprint"] = "0" * 64
        doc["assignment"] = {}
        path = tmp_path / "map.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(PrecisionMapStaleError):
            load_map(path, g)
