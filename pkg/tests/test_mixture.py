"""Conjugate update and E-step math against independent oracles."""

import numpy as np
import pytest
from scipy.special import digamma, logsumexp, multigammaln

from mixprec.vbmix import (
    D,
    MixtureModel,
    ModelUpdateError,
    NIWParams,
    Priors,
    SufficientStats,
    expected_log_weights,
    model_from_dict,
    model_to_dict,
    mvdigamma_half,
    niw_precision_terms,
    posterior_update,
    responsibilities_and_elbo,
    spatial_responsibilities,
)


def toy_priors(n_components=2, v0=1.0):
    return Priors(
        alpha0=1.0,
        kappa0=1.0,
        dof0=float(D + 2),
        m0_space=np.zeros((n_components, D)),
        m0_color=np.zeros((n_components, D)),
        V0_space=v0 * np.eye(D),
        V0_color=v0 * np.eye(D),
    )


def stats_from_resp(resp, space, color):
    """Straightforward weighted-moment accumulation, used as the oracle."""
    return SufficientStats(
        n_count=resp.sum(axis=0),
        space_first=resp.T @ space,
        space_second=np.einsum("bn,bi,bj->nij", resp, space, space),
        color_first=resp.T @ color,
        color_second=np.einsum("bn,bi,bj->nij", resp, color, color),
    )


def random_model(n_components, seed=0):
    rng = np.random.default_rng(seed)
    prm = {}
    for key in ("space", "color"):
        a = 0.2 * rng.standard_normal((n_components, D, D))
        V = np.einsum("nij,nkj->nik", a, a) + np.eye(D)
        prm[key] = NIWParams(
            mean=rng.standard_normal((n_components, D)),
            kappa=rng.uniform(1.0, 8.0, n_components),
            V=V,
            dof=rng.uniform(D + 1.5, D + 12.0, n_components),
        )
    return MixtureModel(
        alpha=rng.uniform(0.5, 4.0, n_components), space=prm["space"], color=prm["color"]
    )


class TestScalarPieces:
    def test_mvdigamma_against_multigammaln_derivative(self):
        # mvdigamma_half(nu) is d/da log Gamma_d(a) evaluated at a = nu/2,
        # so a central difference of scipy's multigammaln checks it.
        for nu in (4.6, 8.0, 19.4):
            h = 1e-6
            fd = (multigammaln(nu / 2 + h, D) - multigammaln(nu / 2 - h, D)) / (2 * h)
            assert float(mvdigamma_half(np.array(nu))) == pytest.approx(fd, rel=1e-7)

    def test_expected_log_weights(self):
        alpha = np.array([1.0, 2.0, 7.0])
        want = digamma(alpha) - digamma(10.0)
        assert np.allclose(expected_log_weights(alpha), want, rtol=0, atol=1e-15)

    def test_precision_terms_invert_v(self):
        model = random_model(5, seed=3)
        vinv, logdet = niw_precision_terms(model.space)
        for n in range(5):
            assert np.allclose(vinv[n] @ model.space.V[n], np.eye(D), atol=1e-12)
            assert logdet[n] == pytest.approx(np.linalg.slogdet(model.space.V[n])[1], rel=1e-13)


class TestPosteriorUpdate:
    def test_single_point_hand_oracle(self):
        # One unit-responsibility observation on component 0 with zero
        # prior mean and kappa0 = 1: m = x/2, kappa = 2, V = V0 + xx^T/2.
        priors = toy_priors()
        x = np.array([1.0, -2.0, 0.5])
        c = np.array([0.25, 0.5, 0.75])
        stats = SufficientStats.zeros(2)
        stats.n_count[0] = 1.0
        stats.space_first[0] = x
        stats.space_second[0] = np.outer(x, x)
        stats.color_first[0] = c
        stats.color_second[0] = np.outer(c, c)

        model = posterior_update(priors, stats)
        assert np.allclose(model.alpha, [2.0, 1.0], atol=0)
        assert np.allclose(model.space.kappa, [2.0, 1.0], atol=0)
        assert np.allclose(model.space.dof, [D + 3, D + 2], atol=0)
        assert np.allclose(model.space.mean[0], x / 2, atol=1e-15)
        assert np.allclose(model.space.V[0], np.eye(D) + np.outer(x, x) / 2, atol=1e-12)
        assert np.allclose(model.color.mean[0], c / 2, atol=1e-15)
        # Untouched component keeps its prior.
        assert np.allclose(model.space.mean[1], 0.0, atol=0)
        assert np.allclose(model.space.V[1], np.eye(D), atol=1e-12)

    def test_matches_weighted_mle_limit(self):
        # With many points and weak priors the posterior mean approaches
        # the weighted sample mean and V/dof the weighted covariance.
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((4000, D)) * np.array([1.0, 2.0, 0.5]) + 3.0
        resp = np.ones((4000, 1))
        priors = toy_priors(n_components=1, v0=1e-4)
        stats = stats_from_resp(resp, pts, np.zeros_like(pts))
        model = posterior_update(priors, stats)
        assert np.allclose(model.space.mean[0], pts.mean(axis=0), atol=5e-3)
        cov = np.cov(pts.T, bias=True)
        assert np.allclose(model.space.V[0] / model.space.dof[0], cov, atol=0.05)

    def test_additive_stats_equal_joint(self):
        rng = np.random.default_rng(6)
        space = rng.standard_normal((64, D))
        color = rng.uniform(0, 1, (64, D))
        logits = rng.standard_normal((64, 4))
        resp = np.exp(logits)
        resp /= resp.sum(axis=1, keepdims=True)

        joint = stats_from_resp(resp, space, color)
        acc = SufficientStats.zeros(4)
        for lo in range(0, 64, 16):
            acc.add(stats_from_resp(resp[lo:lo + 16], space[lo:lo + 16], color[lo:lo + 16]))
        for field in ("n_count", "space_first", "space_second", "color_first", "color_second"):
            assert np.allclose(getattr(acc, field), getattr(joint, field), atol=1e-12)

        ma = posterior_update(toy_priors(4), acc)
        mj = posterior_update(toy_priors(4), joint)
        assert np.allclose(ma.space.V, mj.space.V, atol=1e-12)

    def test_count_conservation(self):
        rng = np.random.default_rng(7)
        resp = rng.dirichlet(np.ones(8), size=100)
        stats = stats_from_resp(resp, rng.standard_normal((100, D)), rng.standard_normal((100, D)))
        assert stats.n_count.sum() == pytest.approx(100.0, abs=1e-9)

    def test_jitter_rescues_borderline_scale(self):
        # A rank-deficient second moment with a negligible prior makes V
        # singular to rounding; one jitter of 1e-9 * trace/d must fix it.
        priors = toy_priors(n_components=1, v0=1e-30)
        x = np.array([1.0, 2.0, 3.0])
        stats = SufficientStats.zeros(1)
        stats.n_count[0] = 1.0
        stats.space_first[0] = x
        stats.space_second[0] = np.outer(x, x)
        stats.color_first[0] = x
        stats.color_second[0] = np.outer(x, x)
        model = posterior_update(priors, stats)  # must not raise
        np.linalg.cholesky(model.space.V)

    def test_unrecoverable_scale_names_component(self):
        priors = toy_priors(n_components=3)
        stats = SufficientStats.zeros(3)
        stats.n_count[1] = 50.0
        stats.space_first[1] = 50.0 * np.array([10.0, 0.0, 0.0])
        # second moment wildly inconsistent with the first: V goes negative
        stats.space_second[1] = np.zeros((D, D))
        with pytest.raises(ModelUpdateError) as exc:
            posterior_update(priors, stats)
        assert exc.value.component == 1
        assert "component 1" in str(exc.value)


class TestResponsibilities:
    def test_against_scalar_oracle(self):
        # Loop-per-component reference with slogdet/inv/logsumexp; the
        # production path is vectorized einsum over a Cholesky.
        model = random_model(6, seed=8)
        rng = np.random.default_rng(9)
        batch = np.hstack([rng.standard_normal((40, D)), rng.uniform(0, 1, (40, D))])
        elbo, resp = responsibilities_and_elbo(model, batch)

        B, N = 40, 6
        log_rho = np.zeros((B, N))
        elw = digamma(model.alpha) - digamma(model.alpha.sum())
        for n in range(N):
            acc = elw[n]
            for niw, x in ((model.space, batch[:, :3]), (model.color, batch[:, 3:])):
                V = niw.V[n]
                logdet = np.linalg.slogdet(V)[1]
                e_logdet = (
                    sum(digamma((niw.dof[n] + 1 - j) / 2.0) for j in range(1, D + 1))
                    + D * np.log(2.0)
                    - logdet
                )
                diff = x - niw.mean[n]
                maha = np.einsum("bi,bi->b", diff @ np.linalg.inv(V), diff)
                acc = acc + (
                    0.5 * e_logdet
                    - 0.5 * D * np.log(2 * np.pi)
                    - 0.5 * D / niw.kappa[n]
                    - 0.5 * niw.dof[n] * maha
                )
            log_rho[:, n] = acc
        want_elbo = logsumexp(log_rho, axis=1)
        want_resp = np.exp(log_rho - want_elbo[:, None])

        assert np.allclose(elbo, want_elbo, rtol=0, atol=1e-12 * np.abs(want_elbo).max())
        assert np.allclose(resp, want_resp, rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self):
        model = random_model(5, seed=10)
        rng = np.random.default_rng(11)
        batch = rng.standard_normal((30, 6))
        _, resp = responsibilities_and_elbo(model, batch)
        assert np.allclose(resp.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(resp >= 0)

    def test_spatial_marginal_ignores_color(self):
        model = random_model(4, seed=12)
        rng = np.random.default_rng(13)
        pts = rng.standard_normal((20, D))
        r = spatial_responsibilities(model, pts)
        assert np.allclose(r.sum(axis=1), 1.0, atol=1e-12)
        # Color parameters must not matter.
        model2 = model.copy()
        model2.color.mean += 100.0
        assert np.allclose(r, spatial_responsibilities(model2, pts), atol=0)

    def test_far_point_concentrates_on_nearest(self):
        model = random_model(2, seed=14)
        model.space.mean = np.array([[0.0, 0, 0], [50.0, 0, 0]])
        near_first = np.array([[0.1, 0, 0, 0.5, 0.5, 0.5]])
        _, resp = responsibilities_and_elbo(model, near_first)
        assert resp[0, 0] > 0.99


class TestCheckpointRoundTrip:
    def test_model_and_priors_survive(self):
        model = random_model(3, seed=15)
        priors = toy_priors(3)
        doc = model_to_dict(model, priors, frames_seen=17)
        m2, p2, frames = model_from_dict(doc)
        assert frames == 17
        assert np.array_equal(m2.alpha, model.alpha)
        for a, b in ((m2.space, model.space), (m2.color, model.color)):
            for f in ("mean", "kappa", "V", "dof"):
                assert np.array_equal(getattr(a, f), getattr(b, f))
        assert p2.alpha0 == priors.alpha0
        assert np.array_equal(p2.m0_space, priors.m0_space)
        assert np.array_equal(p2.V0_color, priors.V0_color)

    def test_priorless_checkpoint(self):
        model = random_model(2, seed=16)
        m2, p2, frames = model_from_dict(model_to_dict(model))
        assert p2 is None
        assert frames == 0
        assert np.array_equal(m2.alpha, model.alpha)


class TestPriorsFromFrame:
    def test_shapes_and_scale(self):
        rng = np.random.default_rng(17)
        frame = np.hstack([rng.uniform(-5, 5, (500, D)), rng.uniform(0, 1, (500, D))])
        priors = Priors.from_frame(frame, 32, np.random.default_rng(0))
        assert priors.m0_space.shape == (32, D)
        assert priors.m0_color.shape == (32, D)
        assert priors.n_components == 32
        # Means are sampled frame points.
        d = np.linalg.norm(frame[None, :, :3] - priors.m0_space[:, None, :], axis=2)
        assert np.all(d.min(axis=1) < 1e-12)
        spacing = np.ptp(frame[:, :3], axis=0).max() / 32 ** (1 / 3)
        assert np.allclose(priors.V0_space, spacing**2 * np.eye(D), atol=0)

    def test_validates_frame_shape(self):
        with pytest.raises(ValueError):
            Priors.from_frame(np.zeros((5, 4)), 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            Priors.from_frame(np.zeros((0, 6)), 2, np.random.default_rng(0))

    def test_deterministic_given_rng_seed(self):
        rng = np.random.default_rng(18)
        frame = np.hstack([rng.standard_normal((100, D)), rng.uniform(0, 1, (100, D))])
        p1 = Priors.from_frame(frame, 8, np.random.default_rng(4))
        p2 = Priors.from_frame(frame, 8, np.random.default_rng(4))
        assert np.array_equal(p1.m0_space, p2.m0_space)
