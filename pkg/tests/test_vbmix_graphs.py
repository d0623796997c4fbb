"""The two hot-function graphs against their host-numpy counterparts."""

import numpy as np
import pytest

from mixprec import FP64, MODES, execute, uniform_config
from mixprec.vbmix import (
    STAT_NAMES,
    STAT_WIDTHS,
    build_elbo_graph,
    build_stats_graph,
    elbo_inputs,
    probe_inputs,
    responsibilities_and_elbo,
    stats_inputs,
    unsummed_stats,
)
from test_mixture import random_model, stats_from_resp


class TestElboGraph:
    def test_structure(self):
        g = build_elbo_graph(64, 512)
        assert len(g.nodes) == 84
        assert len(g.compute_ids()) == 55
        assert [g.node(o).out_shape for o in g.outputs] == [(64,), (64, 512)]

    def test_fp64_matches_host_estep(self):
        model = random_model(24, seed=1)
        rng = np.random.default_rng(2)
        batch = np.hstack([rng.standard_normal((16, 3)), rng.uniform(0, 1, (16, 3))])
        g = build_elbo_graph(16, 24)
        outs, prof = execute(
            g, elbo_inputs(model, batch[:, :3], batch[:, 3:]), uniform_config(g, FP64)
        )
        elbo, resp = responsibilities_and_elbo(model, batch)
        assert np.allclose(outs[0], elbo, rtol=0, atol=1e-12 * max(1.0, np.abs(elbo).max()))
        assert np.allclose(outs[1], resp, rtol=0, atol=1e-12)
        assert prof.output_finite

    def test_responsibilities_normalized_and_stable(self):
        # The softmax is shifted by the row max inside the graph, so no
        # exponent ever exceeds zero even for extreme log-densities.
        model = random_model(8, seed=3)
        model.space.mean *= 30.0  # spread out: large negative log-densities
        rng = np.random.default_rng(4)
        batch = np.hstack([rng.standard_normal((12, 3)), rng.uniform(0, 1, (12, 3))])
        g = build_elbo_graph(12, 8)
        outs, _ = execute(
            g, elbo_inputs(model, batch[:, :3], batch[:, 3:]), uniform_config(g, FP64)
        )
        resp = outs[1]
        assert np.all(resp >= 0) and np.all(resp <= 1)
        assert np.allclose(resp.sum(axis=1), 1.0, atol=1e-12)

    def test_fingerprint_tracks_shape(self):
        assert build_elbo_graph(16, 24).fingerprint == build_elbo_graph(16, 24).fingerprint
        assert build_elbo_graph(16, 24).fingerprint != build_elbo_graph(8, 24).fingerprint
        assert build_elbo_graph(16, 24).fingerprint != build_elbo_graph(16, 32).fingerprint
        assert build_elbo_graph(16, 24).fingerprint != build_stats_graph(16, 24).fingerprint


class TestStatsGraph:
    def test_structure(self):
        g = build_stats_graph(64, 512)
        assert len(g.nodes) == 11
        assert g.compute_ids() == (2, 4, 6, 8, 10)
        assert [g.node(o).out_shape for o in g.outputs] == [
            (512, 1), (512, 3), (512, 3), (512, 9), (512, 9),
        ]

    def test_fp64_matches_weighted_moments(self):
        rng = np.random.default_rng(5)
        B, N = 32, 12
        resp = rng.dirichlet(np.ones(N), size=B)
        space = rng.standard_normal((B, 3))
        color = rng.uniform(0, 1, (B, 3))
        g = build_stats_graph(B, N)
        outs, _ = execute(g, stats_inputs(resp, space, color), uniform_config(g, FP64))
        want = stats_from_resp(resp, space, color)
        assert np.allclose(outs[0][:, 0], want.n_count, atol=1e-12)
        assert np.allclose(outs[1], want.space_first, atol=1e-12)
        assert np.allclose(outs[2], want.color_first, atol=1e-12)
        assert np.allclose(outs[3], want.space_second.reshape(N, 9), atol=1e-12)
        assert np.allclose(outs[4], want.color_second.reshape(N, 9), atol=1e-12)

    def test_modes_agree_bitwise_and_differ_in_peak(self):
        B, N = 8, 16
        feed = probe_inputs("stats", B, N, seed=6)
        g = build_stats_graph(B, N)
        cfg = uniform_config(g, FP64)
        out_f, prof_f = execute(g, feed, cfg, mode=MODES[0])
        out_m, prof_m = execute(g, feed, cfg, mode=MODES[1])
        for a, b in zip(out_f, out_m):
            assert np.array_equal(a, b)
        # The widest statistic dominates: its broadcast product tensor is
        # (N, 9, B) doubles held live only in materialize mode.
        assert prof_m.peak_live_bytes - prof_f.peak_live_bytes == N * 9 * B * 8

    def test_unsummed_stats_layout(self):
        rng = np.random.default_rng(7)
        s = rng.standard_normal((5, 3))
        c = rng.standard_normal((5, 3))
        u = unsummed_stats(s, c)
        assert set(u) == set(STAT_NAMES)
        assert u["count"].shape == (5, 1) and np.all(u["count"] == 1.0)
        assert np.array_equal(u["space_first"], s)
        for b in range(5):
            assert np.array_equal(u["space_second"][b].reshape(3, 3), np.outer(s[b], s[b]))
            assert np.array_equal(u["color_second"][b].reshape(3, 3), np.outer(c[b], c[b]))
        assert {k: v.shape[1] for k, v in u.items()} == STAT_WIDTHS


class TestProbeInputs:
    @pytest.mark.parametrize("kind,builder", [
        ("elbo", build_elbo_graph), ("stats", build_stats_graph),
    ])
    def test_probe_feeds_graph(self, kind, builder):
        g = builder(8, 6)
        feed = probe_inputs(kind, 8, 6, seed=8)
        assert set(feed) == set(g.input_names)
        outs, prof = execute(g, feed, uniform_config(g, FP64))
        assert prof.output_finite
        assert all(np.isfinite(o).all() for o in outs)

    def test_deterministic_per_seed(self):
        a = probe_inputs("elbo", 4, 3, seed=9)
        b = probe_inputs("elbo", 4, 3, seed=9)
        c = probe_inputs("elbo", 4, 3, seed=10)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_elbo_probe_invariants(self):
        feed = probe_inputs("elbo", 4, 5, seed=11)
        for prefix in ("space", "color"):
            vinv = feed[f"{prefix}_vinv"]
            for n in range(5):
                np.linalg.cholesky(vinv[n])  # SPD
                want = -np.linalg.slogdet(vinv[n])[1]
                assert feed[f"{prefix}_logdet"][n] == pytest.approx(want, rel=1e-12)
            assert np.all(feed[f"{prefix}_kappa"] > 0)
            assert np.all(feed[f"{prefix}_dof"] > 2.0)
        assert np.all(feed["alpha"] > 0)

    def test_stats_probe_rows_normalized(self):
        feed = probe_inputs("stats", 16, 7, seed=12)
        assert np.allclose(feed["resp"].sum(axis=1), 1.0, atol=1e-12)
        assert np.all(feed["resp"] > 0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            probe_inputs("gradients", 4, 4, seed=0)
