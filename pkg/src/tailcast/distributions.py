"""Predictive distributions for log-transformed precipitation.

All quantities live in transformed space ``y = log(precip_mm + epsilon)``.
The full model places a point mass at the censor point ``c = log(epsilon)``,
follows a normal law between ``c`` and the threshold ``u`` and switches to a
generalized Pareto tail above ``u``::

    F(y) = 0                                  y < c
    F(y) = p + (1 - p) Phi((y - mu) / sigma)  c <= y <= u
    F(y) = F(u) + (1 - F(u)) GPD(y)           y > u

The mass at ``c`` is therefore ``p + (1 - p) Phi((c - mu) / sigma)``: the
normal mass below ``c`` is folded into the jump, not renormalised.

Functions accept scalar or array ``y``; array helpers with an ``_array``
suffix also broadcast over parameters and are used by the evaluation code.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterDomainError, UnsupportedShapeError

EPSILON_MM = 0.01
CENSOR_POINT = math.log(EPSILON_MM)
THRESHOLD_GAP = 1e-6
SQRT2 = math.sqrt(2.0)


def censor_point(epsilon: float = EPSILON_MM) -> float:
    if epsilon <= 0:
        raise ParameterDomainError(f"epsilon must be positive, got {epsilon}")
    return math.log(epsilon)


def norm_cdf(z):
    """Standard normal CDF via the complementary error function."""
    return 0.5 * special.erfc(-np.asarray(z, dtype=np.float64) / SQRT2)


def norm_pdf(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def norm_ppf(q):
    return special.ndtri(np.asarray(q, dtype=np.float64))


def _scalar_or_array(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


@dataclass(frozen=True)
class TailedMixtureParams:
    """Point mass + normal + GPD tail, all in transformed space.

    ``u = inf`` gives the point-mass normal without a tail.
    """

    p: float
    mu: float
    sigma: float
    u: float = math.inf
    sigma_u: float = 1.0
    xi: float = 0.5
    c: float = CENSOR_POINT

    def __post_init__(self):
        validate_params(self.p, self.mu, self.sigma, self.u, self.sigma_u, self.xi, self.c)

    @property
    def jump_at_censor(self) -> float:
        """Total probability mass located exactly at ``c``."""
        return float(self.p + (1.0 - self.p) * norm_cdf((self.c - self.mu) / self.sigma))

    @property
    def mass_below_threshold(self) -> float:
        """``F(u) = p + (1-p) Phi((u - mu)/sigma)``."""
        return float(self.p + (1.0 - self.p) * norm_cdf((self.u - self.mu) / self.sigma))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("p", "mu", "sigma", "u", "sigma_u", "xi", "c")}


def validate_params(p, mu, sigma, u, sigma_u, xi, c) -> None:
    values = dict(p=p, mu=mu, sigma=sigma, sigma_u=sigma_u, xi=xi)
    for name, v in values.items():
        if not math.isfinite(v):
            raise ParameterDomainError(f"{name} must be finite, got {v}")
    if math.isnan(u) or math.isnan(c) or c == math.inf:
        raise ParameterDomainError(f"invalid threshold/censor pair u={u}, c={c}")
    if not 0.0 <= p <= 1.0:
        raise ParameterDomainError(f"p must lie in [0, 1], got {p}")
    if sigma <= 0:
        raise ParameterDomainError(f"sigma must be positive, got {sigma}")
    if sigma_u <= 0:
        raise ParameterDomainError(f"sigma_u must be positive, got {sigma_u}")
    if xi >= 1:
        raise UnsupportedShapeError(f"xi must be < 1, got {xi}")
    # inclusive so that the clamped learned threshold c + gap is accepted
    if not u >= c + THRESHOLD_GAP:
        raise ParameterDomainError(f"threshold u={u} must be at least c + {THRESHOLD_GAP} (c={c})")


class VariantTag(str, enum.Enum):
    PLAIN_NORMAL = "PlainNormal"
    NORMAL_POINT_MASS = "NormalPointMass"
    NORMAL_POINT_MASS_GPD = "NormalPointMassGPD"


@dataclass(frozen=True)
class DistributionVariant:
    """A predictive distribution of one of the three supported families.

    Fields of ``params`` that the family does not use are ignored: the plain
    normal reads only ``mu``/``sigma``; the point-mass normal ignores the tail.
    """

    tag: VariantTag
    params: TailedMixtureParams

    def __post_init__(self):
        object.__setattr__(self, "tag", VariantTag(self.tag))

    @property
    def effective(self) -> TailedMixtureParams:
        """The mixture parameters actually in force for this family."""
        prm = self.params
        if self.tag is VariantTag.PLAIN_NORMAL:
            return TailedMixtureParams(0.0, prm.mu, prm.sigma, math.inf, 1.0, 0.5, -math.inf)
        if self.tag is VariantTag.NORMAL_POINT_MASS:
            return TailedMixtureParams(prm.p, prm.mu, prm.sigma, math.inf, 1.0, 0.5, prm.c)
        return prm

    def cdf(self, y):
        return mixture_cdf(self.effective, y)

    def quantile(self, tau: float) -> float:
        return mixture_quantile(self.effective, tau)


# ---------------------------------------------------------------- GPD

def _gpd_log_sf(z, xi):
    """log survival of the standard GPD at z >= 0 (``-inf`` past a finite endpoint)."""
    z = np.asarray(z, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    small = np.abs(xi) < 1e-12
    safe_xi = np.where(small, 1.0, xi)
    arg = safe_xi * z
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(arg <= -1.0, -np.inf, -np.log1p(np.maximum(arg, -1.0)) / safe_xi)
    return np.where(small, -z, out)


def gpd_cdf(u: float, sigma_u: float, xi: float, y):
    """Generalized Pareto CDF with threshold ``u``; defined for ``y >= u``.

    For ``xi < 0`` values beyond the upper endpoint ``u - sigma_u / xi`` map to 1.
    """
    if sigma_u <= 0:
        raise ParameterDomainError(f"sigma_u must be positive, got {sigma_u}")
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < u):
        raise ParameterDomainError("gpd_cdf is only defined for y >= u")
    return _scalar_or_array(-np.expm1(_gpd_log_sf((y - u) / sigma_u, xi)))


# ---------------------------------------------------------------- mixture

def mixture_cdf_array(p, mu, sigma, u, sigma_u, xi, c, y):
    """Broadcasting CDF of the mixture; no validation."""
    p, mu, sigma, u, sigma_u, xi, c, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (p, mu, sigma, u, sigma_u, xi, c, y)))
    body = p + (1.0 - p) * norm_cdf((np.minimum(y, u) - mu) / sigma)
    with np.errstate(invalid="ignore"):
        z_tail = np.where(y > u, (y - u) / sigma_u, 0.0)
    tail_cdf = -np.expm1(_gpd_log_sf(z_tail, xi))
    # body is F(u) when y > u
    out = np.where(y > u, body + (1.0 - body) * tail_cdf, body)
    return np.where(y < c, 0.0, out)


def mixture_cdf(params: TailedMixtureParams, y):
    """CDF of the censored-normal/GPD mixture at ``y`` (scalar or array)."""
    prm = params
    return _scalar_or_array(
        mixture_cdf_array(prm.p, prm.mu, prm.sigma, prm.u, prm.sigma_u, prm.xi, prm.c, y))


def mixture_quantile_array(p, mu, sigma, u, sigma_u, xi, c, tau):
    """Smallest ``y`` with ``F(y) >= tau``; broadcasts, no validation."""
    p, mu, sigma, u, sigma_u, xi, c, tau = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (p, mu, sigma, u, sigma_u, xi, c, tau)))
    jump = p + (1.0 - p) * norm_cdf((c - mu) / sigma)
    at_u = p + (1.0 - p) * norm_cdf((u - mu) / sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_body = (tau - p) / (1.0 - p)
        body = mu + sigma * norm_ppf(np.clip(q_body, 0.0, 1.0))
        g = np.clip((tau - at_u) / (1.0 - at_u), 0.0, 1.0)
        log_surv = np.log1p(-g)
        small = np.abs(xi) < 1e-12
        safe_xi = np.where(small, 1.0, xi)
        excess = np.where(small, -log_surv, np.expm1(-safe_xi * log_surv) / safe_xi)
        tail = u + sigma_u * excess
    out = np.where(tau <= at_u, np.maximum(body, c), tail)
    return np.where(tau <= jump, c, out)


def mixture_quantile(params: TailedMixtureParams, tau: float) -> float:
    """Quantile function (generalised inverse) of the mixture."""
    if not 0.0 < tau < 1.0:
        raise ParameterDomainError(f"tau must lie in (0, 1), got {tau}")
    prm = params
    return float(mixture_quantile_array(prm.p, prm.mu, prm.sigma, prm.u, prm.sigma_u,
                                        prm.xi, prm.c, tau))


def exceedance_probability(params: TailedMixtureParams, threshold_raw: float,
                           epsilon: float = EPSILON_MM) -> float:
    """P[precip > threshold_raw] for a threshold given in millimetres."""
    if threshold_raw < 0:
        raise ParameterDomainError(f"threshold must be non-negative, got {threshold_raw}")
    return 1.0 - float(mixture_cdf(params, math.log(threshold_raw + epsilon)))


def mixture_sample(params: TailedMixtureParams, rng_seed: int, n: int) -> np.ndarray:
    """``n`` i.i.d. draws by inverse transform of uniform variates."""
    if n < 1:
        raise ParameterDomainError(f"sample size must be >= 1, got {n}")
    uniforms = np.random.default_rng(rng_seed).random(n)
    prm = params
    return mixture_quantile_array(prm.p, prm.mu, prm.sigma, prm.u, prm.sigma_u, prm.xi,
                                  prm.c, uniforms)
