"""Gaussian-mixture model with conjugate Dirichlet / Normal-Inverse-Wishart
posteriors over two independent 3-d modalities (position and color).

The model is never trained by gradient steps: every frame contributes
weighted sufficient statistics, and the posterior is recomputed in
closed form from the priors plus the accumulated statistics.  Because
statistics only accumulate, no frame is ever revisited.

This module is plain float64 numpy.  The batched responsibility/ELBO
evaluation also exists as a tensor graph (see ``graphs``); the direct
implementation here is the reference the graph is validated against,
and the one evaluation-time code paths use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.special as sc

__all__ = [
    "ModelUpdateError",
    "NIWParams",
    "MixtureModel",
    "Priors",
    "SufficientStats",
    "mvdigamma_half",
    "expected_log_weights",
    "expected_log_densities",
    "responsibilities_and_elbo",
    "spatial_responsibilities",
    "posterior_update",
    "model_to_dict",
    "model_from_dict",
]

D = 3  # both modalities are 3-dimensional

CHECKPOINT_VERSION = 1


class ModelUpdateError(RuntimeError):
    """A component's scale matrix stopped being positive-definite."""

    def __init__(self, component: int, message: str):
        super().__init__(f"component {component}: {message}")
        self.component = component


@dataclass
class NIWParams:
    """Per-component Normal-Inverse-Wishart posterior for one modality."""

    mean: np.ndarray  # (N, 3)
    kappa: np.ndarray  # (N,)
    V: np.ndarray  # (N, 3, 3) symmetric positive-definite
    dof: np.ndarray  # (N,), > D - 1

    def copy(self) -> "NIWParams":
        return NIWParams(self.mean.copy(), self.kappa.copy(), self.V.copy(), self.dof.copy())


@dataclass
class MixtureModel:
    alpha: np.ndarray  # (N,) Dirichlet parameters
    space: NIWParams
    color: NIWParams

    @property
    def n_components(self) -> int:
        return self.alpha.shape[0]

    def copy(self) -> "MixtureModel":
        return MixtureModel(self.alpha.copy(), self.space.copy(), self.color.copy())


@dataclass(frozen=True)
class Priors:
    alpha0: float
    kappa0: float
    dof0: float
    m0_space: np.ndarray  # (N, 3)
    m0_color: np.ndarray  # (N, 3)
    V0_space: np.ndarray  # (3, 3)
    V0_color: np.ndarray  # (3, 3)

    @property
    def n_components(self) -> int:
        return self.m0_space.shape[0]

    @staticmethod
    def from_frame(
        points: np.ndarray,
        n_components: int,
        rng: np.random.Generator,
        alpha0: float = 1.0,
        kappa0: float = 1.0,
        color_scale: float = 0.15,
    ) -> "Priors":
        """Data-driven initialization from the first frame.

        Prior means are sampled frame points (with replacement when the
        frame is small); the spatial prior scale follows the bounding
        box so roughly N components tile the observed volume.
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 6:
            raise ValueError(f"expected (P, 6) frame, got {pts.shape}")
        if pts.shape[0] == 0:
            raise ValueError("empty frame")
        idx = rng.choice(pts.shape[0], size=n_components, replace=pts.shape[0] < n_components)
        extent = float(np.max(np.ptp(pts[:, :3], axis=0)))
        extent = max(extent, 1e-6)
        # A generous scale: underestimating it starves flat regions of
        # prior variance, which reduced-precision statistics punish.
        spacing = extent / n_components ** (1.0 / 3.0)
        return Priors(
            alpha0=alpha0,
            kappa0=kappa0,
            dof0=float(D + 2),
            m0_space=pts[idx, :3].copy(),
            m0_color=pts[idx, 3:].copy(),
            V0_space=spacing**2 * np.eye(D),
            V0_color=color_scale**2 * np.eye(D),
        )


@dataclass
class SufficientStats:
    """Accumulated weighted statistics; additive across batches and frames."""

    n_count: np.ndarray  # (N,)
    space_first: np.ndarray  # (N, 3)
    space_second: np.ndarray  # (N, 3, 3)
    color_first: np.ndarray  # (N, 3)
    color_second: np.ndarray  # (N, 3, 3)

    @staticmethod
    def zeros(n_components: int) -> "SufficientStats":
        return SufficientStats(
            n_count=np.zeros(n_components),
            space_first=np.zeros((n_components, D)),
            space_second=np.zeros((n_components, D, D)),
            color_first=np.zeros((n_components, D)),
            color_second=np.zeros((n_components, D, D)),
        )

    def add(self, other: "SufficientStats") -> None:
        self.n_count += other.n_count
        self.space_first += other.space_first
        self.space_second += other.space_second
        self.color_first += other.color_first
        self.color_second += other.color_second

    def copy(self) -> "SufficientStats":
        return SufficientStats(
            self.n_count.copy(),
            self.space_first.copy(),
            self.space_second.copy(),
            self.color_first.copy(),
            self.color_second.copy(),
        )


def mvdigamma_half(a: np.ndarray, d: int = D) -> np.ndarray:
    """Multivariate digamma: sum_i psi((a + 1 - i)/2) for i = 1..d."""
    a = np.asarray(a, dtype=np.float64)
    return sum(sc.digamma((a - i) / 2.0) for i in range(d))  # offsets 0,-1,...  (a+1-i for i=1..d)


def expected_log_weights(alpha: np.ndarray) -> np.ndarray:
    """E[log pi] under Dirichlet(alpha): psi(alpha_n) - psi(sum alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return sc.digamma(alpha) - sc.digamma(alpha.sum())


def _chol_all(V: np.ndarray) -> np.ndarray:
    """Batched Cholesky that names the offending component on failure."""
    try:
        return np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        for n in range(V.shape[0]):
            try:
                np.linalg.cholesky(V[n])
            except np.linalg.LinAlgError:
                raise ModelUpdateError(n, "scale matrix is not positive-definite") from None
        raise


def niw_precision_terms(niw: NIWParams) -> tuple[np.ndarray, np.ndarray]:
    """Host-side Cholesky pass: (V^-1 per component, log det V per component)."""
    L = _chol_all(niw.V)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    Linv = np.linalg.solve(L, np.broadcast_to(np.eye(D), L.shape))
    vinv = np.einsum("nki,nkj->nij", Linv, Linv)
    return vinv, logdet


def expected_log_densities(niw: NIWParams, x: np.ndarray) -> np.ndarray:
    """E[log N(x | mu, Sigma)] under the NIW posterior, for all (b, n) pairs.

    Returns (B, N).  Uses the standard expectations: the multivariate
    digamma + logdet term for E[log det Lambda], the d/kappa mean
    correction, and the dof-scaled Mahalanobis form.
    """
    x = np.asarray(x, dtype=np.float64)
    vinv, logdet = niw_precision_terms(niw)
    e_logdet = mvdigamma_half(niw.dof) + D * np.log(2.0) - logdet  # (N,)
    diff = x[:, None, :] - niw.mean[None, :, :]  # (B, N, 3)
    maha = np.einsum("bnd,nde,bne->bn", diff, vinv, diff)
    return 0.5 * e_logdet - 0.5 * D * np.log(2.0 * np.pi) - 0.5 * D / niw.kappa - 0.5 * niw.dof * maha


def responsibilities_and_elbo(
    model: MixtureModel, batch: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Variational E-step: per-point evidence bound and soft assignments.

    ``batch`` is (B, 6) with spatial coordinates first.  Returns
    (elbo_per_point (B,), R (B, N)); R rows sum to 1.
    """
    batch = np.asarray(batch, dtype=np.float64)
    log_rho = (
        expected_log_weights(model.alpha)[None, :]
        + expected_log_densities(model.space, batch[:, :3])
        + expected_log_densities(model.color, batch[:, 3:])
    )
    row_max = np.max(log_rho, axis=1)
    z = np.exp(log_rho - row_max[:, None])
    denom = z.sum(axis=1)
    return np.log(denom) + row_max, z / denom[:, None]


def spatial_responsibilities(model: MixtureModel, points: np.ndarray) -> np.ndarray:
    """Soft assignments from spatial coordinates alone (color marginalized)."""
    points = np.asarray(points, dtype=np.float64)
    log_rho = expected_log_weights(model.alpha)[None, :] + expected_log_densities(
        model.space, points
    )
    z = np.exp(log_rho - np.max(log_rho, axis=1)[:, None])
    return z / z.sum(axis=1)[:, None]


def _update_modality(
    m0: np.ndarray,
    kappa0: float,
    dof0: float,
    V0: np.ndarray,
    n: np.ndarray,
    first: np.ndarray,
    second: np.ndarray,
) -> NIWParams:
    kappa = kappa0 + n
    dof = dof0 + n
    mean = (kappa0 * m0 + first) / kappa[:, None]
    V = (
        V0[None, :, :]
        + second
        + kappa0 * np.einsum("nd,ne->nde", m0, m0)
        - kappa[:, None, None] * np.einsum("nd,ne->nde", mean, mean)
    )
    V = 0.5 * (V + np.swapaxes(V, 1, 2))  # keep exact symmetry
    return NIWParams(mean=mean, kappa=kappa, V=V, dof=dof)


def _ensure_definite(niw: NIWParams) -> None:
    """Cholesky check with a single jitter retry per the numerical guard."""
    try:
        _chol_all(niw.V)
        return
    except ModelUpdateError:
        pass
    trace = np.trace(niw.V, axis1=1, axis2=2)
    niw.V += (1e-9 * trace / D)[:, None, None] * np.eye(D)
    _chol_all(niw.V)  # raises ModelUpdateError with the component id if still bad


def posterior_update(priors: Priors, stats: SufficientStats) -> MixtureModel:
    """Closed-form conjugate posterior from priors + accumulated statistics."""
    alpha = priors.alpha0 + stats.n_count
    space = _update_modality(
        priors.m0_space,
        priors.kappa0,
        priors.dof0,
        priors.V0_space,
        stats.n_count,
        stats.space_first,
        stats.space_second,
    )
    color = _update_modality(
        priors.m0_color,
        priors.kappa0,
        priors.dof0,
        priors.V0_color,
        stats.n_count,
        stats.color_first,
        stats.color_second,
    )
    _ensure_definite(space)
    _ensure_definite(color)
    return MixtureModel(alpha=alpha, space=space, color=color)


def _niw_to_dict(niw: NIWParams) -> dict:
    return {
        "mean": niw.mean.tolist(),
        "kappa": niw.kappa.tolist(),
        "V": niw.V.tolist(),
        "dof": niw.dof.tolist(),
    }


def _niw_from_dict(d: dict) -> NIWParams:
    return NIWParams(
        mean=np.asarray(d["mean"], dtype=np.float64),
        kappa=np.asarray(d["kappa"], dtype=np.float64),
        V=np.asarray(d["V"], dtype=np.float64),
        dof=np.asarray(d["dof"], dtype=np.float64),
    )


def model_to_dict(model: MixtureModel, priors: Priors | None = None, frames_seen: int = 0) -> dict:
    doc = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "frames_seen": frames_seen,
        "alpha": model.alpha.tolist(),
        "space": _niw_to_dict(model.space),
        "color": _niw_to_dict(model.color),
    }
    if priors is not None:
        doc["priors"] = {
            "alpha0": priors.alpha0,
            "kappa0": priors.kappa0,
            "dof0": priors.dof0,
            "m0_space": priors.m0_space.tolist(),
            "m0_color": priors.m0_color.tolist(),
            "V0_space": priors.V0_space.tolist(),
            "V0_color": priors.V0_color.tolist(),
        }
    return doc


def model_from_dict(doc: dict) -> tuple[MixtureModel, Priors | None, int]:
    if doc.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('checkpoint_version')!r}")
    model = MixtureModel(
        alpha=np.asarray(doc["alpha"], dtype=np.float64),
        space=_niw_from_dict(doc["space"]),
        color=_niw_from_dict(doc["color"]),
    )
    priors = None
    if "priors" in doc:
        p = doc["priors"]
        priors = Priors(
            alpha0=float(p["alpha0"]),
            kappa0=float(p["kappa0"]),
            dof0=float(p["dof0"]),
            m0_space=np.asarray(p["m0_space"], dtype=np.float64),
            m0_color=np.asarray(p["m0_color"], dtype=np.float64),
            V0_space=np.asarray(p["V0_space"], dtype=np.float64),
            V0_color=np.asarray(p["V0_color"], dtype=np.float64),
        )
    return model, priors, int(doc.get("frames_seen", 0))
