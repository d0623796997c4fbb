"""The trainer's two hot functions expressed as tensor graphs.

``build_elbo_graph`` evaluates the variational E-step for a fixed batch
size B and component count N: per-point evidence bound and the B x N
responsibility matrix.  ``build_stats_graph`` reduces the responsibility-
weighted per-sample statistics over the batch, dS[n,k] = sum_b R[b,n] *
S_u[b,k], as five contractions (count, two first moments, two flattened
second moments) with the widest (K=9) statistics last, so the peak-
memory gap between fused and materialized execution is exactly the
B x N x 9 intermediate.

The matrix inversions live on the host: the model's scale matrices are
Cholesky-factored once per batch outside the graph, and the graphs take
V^-1 and log det V as plain inputs.  Graph input names are the packing
contract; ``elbo_inputs`` / ``stats_inputs`` produce matching dicts from
a model and batch, and ``probe_inputs`` produces deterministic white-
noise stand-ins with the same domain constraints (positive
concentrations, SPD precision matrices, row-stochastic weights) for the
offline precision search.
"""

from __future__ import annotations

import numpy as np

from ..graph import Graph, GraphBuilder
from .model import D, MixtureModel, niw_precision_terms

__all__ = [
    "build_elbo_graph",
    "build_stats_graph",
    "elbo_inputs",
    "unsummed_stats",
    "stats_inputs",
    "probe_inputs",
    "STAT_NAMES",
    "STAT_WIDTHS",
]

# Statistic order is a contract: widest last keeps the materialized
# intermediate's peak at the final node in both execution modes.
STAT_NAMES = ("count", "space_first", "color_first", "space_second", "color_second")
STAT_WIDTHS = {
    "count": 1,
    "space_first": D,
    "color_first": D,
    "space_second": D * D,
    "color_second": D * D,
}


def _modality_log_density(b: GraphBuilder, points: int, prefix: str, B: int, N: int) -> int:
    """Expected Gaussian log-density block for one modality; returns (B, N) node."""
    mean = b.input(f"{prefix}_mean", (N, D))
    vinv = b.input(f"{prefix}_vinv", (N, D, D))
    logdet = b.input(f"{prefix}_logdet", (N,))
    kappa = b.input(f"{prefix}_kappa", (N,))
    dof = b.input(f"{prefix}_dof", (N,))

    x_r = b.reshape(points, (B, 1, D))
    diff = b.sub(x_r, mean)  # (B, N, D)
    # (x - m)^T V^-1 (x - m), batched over components
    t = b.contract(diff, vinv, contract=((2,), (1,)), batch=((1,), (0,)))  # (N, B, D)
    q = b.contract(t, diff, contract=((2,), (2,)), batch=((0, 1), (1, 0)))  # (N, B)
    maha = b.transpose(q, (1, 0))  # (B, N)
    quad = b.mul(maha, dof)

    # E[log det Lambda] = mvdigamma(dof/2) + d log 2 - log det V
    dof_col = b.reshape(dof, (N, 1))
    shifted = b.add(dof_col, b.constant(np.array([0.0, -1.0, -2.0])))
    dg = b.digamma(b.mul(shifted, b.constant(0.5)))
    mvdig = b.reduce_sum(dg, (1,))  # (N,)
    e_logdet = b.sub(b.add(mvdig, b.constant(D * np.log(2.0))), logdet)

    kcorr = b.div(b.constant(float(D)), kappa)  # (N,)
    const_part = b.sub(
        b.mul(e_logdet, b.constant(0.5)),
        b.constant(0.5 * D * np.log(2.0 * np.pi)),
    )
    per_comp = b.sub(const_part, b.mul(kcorr, b.constant(0.5)))  # (N,)
    return b.sub(per_comp, b.mul(quad, b.constant(0.5)))  # (B, N)


def build_elbo_graph(B: int, N: int) -> Graph:
    """Per-point evidence bound and responsibilities for fixed (B, N).

    Outputs [elbo (B,), resp (B, N)].  The softmax is row-stabilized by
    the row max so narrow formats see exponents at or below zero.
    """
    b = GraphBuilder(f"elbo_resp_b{B}_n{N}")
    points_space = b.input("points_space", (B, D))
    points_color = b.input("points_color", (B, D))
    alpha = b.input("alpha", (N,))

    ll_space = _modality_log_density(b, points_space, "space", B, N)
    ll_color = _modality_log_density(b, points_color, "color", B, N)

    log_pi = b.sub(b.digamma(alpha), b.digamma(b.reduce_sum(alpha, (0,))))  # (N,)
    log_rho = b.add(b.add(log_pi, ll_space), ll_color)  # (B, N)

    row_max = b.reduce_max(log_rho, (1,))  # (B,)
    z = b.sub(log_rho, b.reshape(row_max, (B, 1)))
    e = b.exp(z)
    s = b.reduce_sum(e, (1,))  # (B,)
    resp = b.div(e, b.reshape(s, (B, 1)))
    elbo = b.add(b.log(s), row_max)
    return b.build([elbo, resp])


def build_stats_graph(B: int, N: int) -> Graph:
    """Weighted reduction dS[n,k] = sum_b R[b,n] S_u[b,k] for all statistics."""
    b = GraphBuilder(f"weighted_stats_b{B}_n{N}")
    resp = b.input("resp", (B, N))
    outs = []
    for name in STAT_NAMES:
        stat = b.input(f"stat_{name}", (B, STAT_WIDTHS[name]))
        outs.append(b.contract(resp, stat, contract=((0,), (0,))))  # (N, K)
    return b.build(outs)


def elbo_inputs(model: MixtureModel, batch_space: np.ndarray, batch_color: np.ndarray) -> dict:
    """Pack a model and point batch into the elbo graph's input dict.

    The Cholesky work (V^-1 and log det V per component and modality)
    happens here in float64, once per call.
    """
    feed = {
        "points_space": np.asarray(batch_space, dtype=np.float64),
        "points_color": np.asarray(batch_color, dtype=np.float64),
        "alpha": model.alpha,
    }
    for prefix, niw in (("space", model.space), ("color", model.color)):
        vinv, logdet = niw_precision_terms(niw)
        feed[f"{prefix}_mean"] = niw.mean
        feed[f"{prefix}_vinv"] = vinv
        feed[f"{prefix}_logdet"] = logdet
        feed[f"{prefix}_kappa"] = niw.kappa
        feed[f"{prefix}_dof"] = niw.dof
    return feed


def unsummed_stats(batch_space: np.ndarray, batch_color: np.ndarray) -> dict:
    """Per-sample statistics S_u: count 1, first moments, flattened outer products."""
    s = np.asarray(batch_space, dtype=np.float64)
    c = np.asarray(batch_color, dtype=np.float64)
    B = s.shape[0]
    return {
        "count": np.ones((B, 1)),
        "space_first": s.copy(),
        "color_first": c.copy(),
        "space_second": np.einsum("bi,bj->bij", s, s).reshape(B, D * D),
        "color_second": np.einsum("bi,bj->bij", c, c).reshape(B, D * D),
    }


def stats_inputs(resp: np.ndarray, batch_space: np.ndarray, batch_color: np.ndarray) -> dict:
    feed = {"stat_" + k: v for k, v in unsummed_stats(batch_space, batch_color).items()}
    feed["resp"] = np.asarray(resp, dtype=np.float64)
    return feed


def probe_inputs(kind: str, B: int, N: int, seed: int) -> dict:
    """Deterministic white-noise probe honoring each input's domain.

    Positions and colors are standard normal; model-parameter inputs get
    random values satisfying their invariants (positive kappa/alpha,
    dof > d - 1, SPD precision matrices with consistent log-dets), so a
    probe run covers the same numeric ranges as a real one without
    depending on any scene.
    """
    rng = np.random.default_rng(seed)
    if kind == "elbo":
        feed = {
            "points_space": rng.standard_normal((B, D)),
            "points_color": rng.standard_normal((B, D)),
            "alpha": rng.uniform(0.5, 5.0, N),
        }
        for prefix in ("space", "color"):
            a = 0.3 * rng.standard_normal((N, D, D))
            prec = np.einsum("nij,nkj->nik", a, a) + 0.5 * np.eye(D)
            feed[f"{prefix}_mean"] = rng.standard_normal((N, D))
            feed[f"{prefix}_vinv"] = prec
            feed[f"{prefix}_logdet"] = -np.linalg.slogdet(prec)[1]  # log det V
            feed[f"{prefix}_kappa"] = rng.uniform(0.5, 10.0, N)
            feed[f"{prefix}_dof"] = rng.uniform(D + 1.0, D + 20.0, N)
        return feed
    if kind == "stats":
        logits = rng.standard_normal((B, N))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        resp = z / z.sum(axis=1, keepdims=True)
        return stats_inputs(resp, rng.standard_normal((B, D)), rng.standard_normal((B, D)))
    raise ValueError(f"unknown probe kind {kind!r}")
