"""Censored-normal / GPD mixture precipitation post-processing on station graphs."""
from .distributions import (
    DistributionVariant,
    TailedMixtureParams,
    VariantTag,
    exceedance_probability,
    gpd_cdf,
    mixture_cdf,
    mixture_quantile,
    mixture_sample,
)
from .errors import (
    DegenerateThresholdError,
    MissingDataError,
    NumericError,
    ParameterDomainError,
    ValidationError,
)
from .graph import Station, StationGraph, build_graph, geodesic_distance
from .scoring import (
    brier_score,
    crps_ensemble,
    crps_mixture,
    crps_normal,
    quantile_score,
)

__version__ = "0.1.0"

__all__ = [
    "DistributionVariant", "TailedMixtureParams", "VariantTag", "exceedance_probability",
    "gpd_cdf", "mixture_cdf", "mixture_quantile", "mixture_sample",
    "DegenerateThresholdError", "MissingDataError", "NumericError", "ParameterDomainError",
    "ValidationError", "Station", "StationGraph", "build_graph", "geodesic_distance",
    "brier_score", "crps_ensemble", "crps_mixture", "crps_normal", "quantile_score",
]
