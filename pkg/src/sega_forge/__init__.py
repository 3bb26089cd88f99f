"""Semantic guidance composition engine with an analytic mixture diffusion testbed."""

from sega_forge.diagnostics import (
    DistributionReport,
    MaskReport,
    distribution_report,
    mask_report,
)
from sega_forge.diffusion import (
    AnalyticEstimator,
    GuidedRun,
    MixtureComponent,
    MixtureModel,
    ProductEstimator,
    Schedule,
    classify,
    exact_noise_estimate,
    implicit_classifier_gradient,
    label_posterior,
    log_density,
    predict_original,
    run_guided,
    run_replay,
    sampler_step,
)
from sega_forge.guidance import (
    ConceptEdit,
    GuidanceConfig,
    GuidanceState,
    ParameterError,
    apply_recorded,
    cfg_term,
    combine_concepts,
    edit_direction,
    guidance_term,
    momentum_update,
    recorded_guidance,
    sega_step,
    threshold_mask,
)
from sega_forge.tensors import Latent, Rng, ShapeMismatchError, gaussian_sample, percentile_threshold

__all__ = [
    "AnalyticEstimator",
    "ConceptEdit",
    "DistributionReport",
    "GuidanceConfig",
    "GuidanceState",
    "GuidedRun",
    "Latent",
    "MaskReport",
    "MixtureComponent",
    "MixtureModel",
    "ParameterError",
    "ProductEstimator",
    "Rng",
    "Schedule",
    "ShapeMismatchError",
    "apply_recorded",
    "cfg_term",
    "classify",
    "combine_concepts",
    "distribution_report",
    "edit_direction",
    "exact_noise_estimate",
    "gaussian_sample",
    "guidance_term",
    "implicit_classifier_gradient",
    "label_posterior",
    "log_density",
    "mask_report",
    "momentum_update",
    "percentile_threshold",
    "predict_original",
    "recorded_guidance",
    "run_guided",
    "run_replay",
    "sampler_step",
    "sega_step",
    "threshold_mask",
]
