"""Streaming variational Gaussian-mixture trainer and its tensor graphs."""

from .model import (
    D,
    MixtureModel,
    ModelUpdateError,
    NIWParams,
    Priors,
    SufficientStats,
    expected_log_densities,
    expected_log_weights,
    model_from_dict,
    model_to_dict,
    mvdigamma_half,
    niw_precision_terms,
    posterior_update,
    responsibilities_and_elbo,
    spatial_responsibilities,
)
from .graphs import (
    STAT_NAMES,
    STAT_WIDTHS,
    build_elbo_graph,
    build_stats_graph,
    elbo_inputs,
    probe_inputs,
    stats_inputs,
    unsummed_stats,
)
from .train import (
    FrameMetrics,
    HotFunctions,
    NumericsError,
    TrainerConfig,
    TrainResult,
    fit_frame,
    frame_elbo,
    reassign_components,
    train,
    train_scene,
)

__all__ = [
    "D",
    "MixtureModel",
    "ModelUpdateError",
    "NIWParams",
    "Priors",
    "SufficientStats",
    "expected_log_densities",
    "expected_log_weights",
    "model_from_dict",
    "model_to_dict",
    "mvdigamma_half",
    "niw_precision_terms",
    "posterior_update",
    "responsibilities_and_elbo",
    "spatial_responsibilities",
    "STAT_NAMES",
    "STAT_WIDTHS",
    "build_elbo_graph",
    "build_stats_graph",
    "elbo_inputs",
    "probe_inputs",
    "stats_inputs",
    "unsummed_stats",
    "FrameMetrics",
    "HotFunctions",
    "NumericsError",
    "TrainerConfig",
    "TrainResult",
    "fit_frame",
    "frame_elbo",
    "reassign_components",
    "train",
    "train_scene",
]
