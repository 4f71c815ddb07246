"""Proper scoring rules.

Closed-form CRPS for the censored-normal/GPD mixture, built from two pieces:

* ``F1`` -- point mass at ``c`` plus normal on ``[c, u)``, with the remaining
  normal mass ``P_u`` lumped at ``u``;
* ``F2`` -- GPD above ``u`` with point mass ``M = F(u)`` at ``u``.

For ``y < u`` the score is ``CRPS(F1, y) + CRPS(F2, u)``; for ``y >= u`` it is
``CRPS(F1, u) + CRPS(F2, y)``.  Baseline scores (normal, ensemble), Brier,
the pinball quantile score and a quadrature oracle live here as well.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .distributions import (
    DistributionVariant,
    TailedMixtureParams,
    VariantTag,
    mixture_cdf,
    mixture_quantile,
    norm_cdf,
    norm_pdf,
)
from .errors import OracleFailure, ParameterDomainError, UnsupportedShapeError

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)


class Branch(str, enum.Enum):
    BELOW_U = "BelowU"
    ABOVE_U = "AboveU"


@dataclass(frozen=True)
class CrpsBreakdown:
    crps_f1_part: float
    crps_f2_part: float
    total: float
    branch: Branch


def _scalar_or_array(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def _times_mass(x, mass):
    # x * mass with 0 * inf treated as 0 (infinite endpoints carry no mass)
    with np.errstate(invalid="ignore"):
        return np.where(mass > 0, x * mass, 0.0)


def _phi_interval(a, b):
    """Phi(b) - Phi(a) without cancellation in the upper tail."""
    return np.where(a > 0, norm_cdf(-a) - norm_cdf(-b), norm_cdf(b) - norm_cdf(a))


# ---------------------------------------------------------------- F1 part

def _crps_f1_std_array(p, c, u, y):
    p, c, u, y = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (p, c, u, y)))
    q = 1.0 - p
    mass_c = p + q * norm_cdf(c)
    mass_u = q * norm_cdf(-u)
    g_c, g_u, g_y = -norm_pdf(c), -norm_pdf(u), -norm_pdf(y)
    cdf_y = np.where(y < c, 0.0, np.where(y >= u, 1.0, p + q * norm_cdf(y)))
    c_mass = _times_mass(c, mass_c)
    u_mass = _times_mass(u, mass_u)
    branch = np.where(y < c, q * g_c - c_mass,
                      np.where(y < u, q * g_y, q * g_u + u_mass))
    integral = -_phi_interval(SQRT2 * c, SQRT2 * u) / (2.0 * SQRT_PI)
    return (y * (2.0 * cdf_y - 1.0) - c_mass * mass_c + u_mass * mass_u
            + 2.0 * q * g_c * mass_c + 2.0 * q * g_u * mass_u
            - 2.0 * branch + 2.0 * q * q * integral)


def crps_f1_standard(p: float, c: float, u: float, y):
    """CRPS of the standardised ``F1`` (point mass at ``c``, N(0,1) on [c,u), mass at ``u``)."""
    if not c < u:
        raise ParameterDomainError(f"need c < u, got c={c}, u={u}")
    if not 0.0 <= p <= 1.0:
        raise ParameterDomainError(f"p must lie in [0, 1], got {p}")
    return _scalar_or_array(_crps_f1_std_array(p, c, u, y))


def crps_f1(p, mu, sigma, c, u, y):
    """Location-scale version of :func:`crps_f1_standard`."""
    if sigma <= 0:
        raise ParameterDomainError(f"sigma must be positive, got {sigma}")
    y = np.asarray(y, dtype=np.float64)
    return _scalar_or_array(sigma * crps_f1_standard(p, (c - mu) / sigma, (u - mu) / sigma,
                                                      (y - mu) / sigma))


def _crps_f1_at_u_std_array(p, c, u):
    p, c, u = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (p, c, u)))
    q = 1.0 - p
    mass_c = p + q * norm_cdf(c)
    mass_u = q * norm_cdf(-u)
    g_c, g_u = -norm_pdf(c), -norm_pdf(u)
    c_mass = _times_mass(c, mass_c)
    u_mass = _times_mass(u, mass_u)
    return (u - c_mass * mass_c + u_mass * mass_u + 2.0 * q * g_c * mass_c
            + 2.0 * q * g_u * mass_u - 2.0 * (q * g_u + u_mass)
            - q * q * _phi_interval(SQRT2 * c, SQRT2 * u) / SQRT_PI)


def crps_f1_at_u(p, mu, sigma, c, u) -> float:
    """``CRPS(F1, u)`` via its dedicated closed form."""
    if sigma <= 0:
        raise ParameterDomainError(f"sigma must be positive, got {sigma}")
    if not c < u or not math.isfinite(u):
        raise ParameterDomainError(f"need finite u > c, got c={c}, u={u}")
    return float(sigma * _crps_f1_at_u_std_array(p, (c - mu) / sigma, (u - mu) / sigma))


# ---------------------------------------------------------------- F2 part

def _crps_f2_array(mass, u, sigma_u, xi, y):
    mass, u, sigma_u, xi, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (mass, u, sigma_u, xi, y)))
    with np.errstate(invalid="ignore"):
        z = np.where(y > u, (y - u) / sigma_u, 0.0)
    small = np.abs(xi) < 1e-12
    safe_xi = np.where(small, 1.0, xi)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = safe_xi * z
        log_sf = np.where(small, -z,
                          np.where(arg <= -1.0, -np.inf, -np.log1p(np.maximum(arg, -1.0)) / safe_xi))
    sf_pow = np.exp((1.0 - xi) * log_sf)
    rest = 1.0 - mass
    return sigma_u * (z - 2.0 * rest / (1.0 - xi) * (1.0 - sf_pow) + rest * rest / (2.0 - xi))


def _check_f2(mass, sigma_u, xi):
    if xi >= 1:
        raise UnsupportedShapeError(f"GPD CRPS needs xi < 1, got {xi}")
    if sigma_u <= 0:
        raise ParameterDomainError(f"sigma_u must be positive, got {sigma_u}")
    if not 0.0 <= mass <= 1.0:
        raise ParameterDomainError(f"point mass M must lie in [0, 1], got {mass}")


def crps_f2(M, u, sigma_u, xi, y):
    """CRPS of a GPD above ``u`` carrying point mass ``M`` at ``u``; ``y >= u``."""
    _check_f2(M, sigma_u, xi)
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < u):
        raise ParameterDomainError("crps_f2 requires y >= u")
    return _scalar_or_array(_crps_f2_array(M, u, sigma_u, xi, y))


def crps_f2_at_u(M, sigma_u, xi) -> float:
    _check_f2(M, sigma_u, xi)
    return sigma_u * (1.0 - M) ** 2 / (2.0 - xi)


# ---------------------------------------------------------------- full mixture

def crps_mixture_parts_array(p, mu, sigma, u, sigma_u, xi, c, y):
    """(F1 part, F2 part) of the mixture CRPS, broadcasting over every argument."""
    p, mu, sigma, u, sigma_u, xi, c, y = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.float64) for v in (p, mu, sigma, u, sigma_u, xi, c, y)))
    zc, zu, zy = (c - mu) / sigma, (u - mu) / sigma, (y - mu) / sigma
    below = y < u
    finite_u = np.isfinite(u)
    f1_at_u = _crps_f1_at_u_std_array(p, zc, np.where(finite_u, zu, 0.0))
    f1_part = sigma * np.where(below, _crps_f1_std_array(p, zc, zu, zy), f1_at_u)
    mass_u = p + (1.0 - p) * norm_cdf(zu)
    f2_part = np.where(finite_u, _crps_f2_array(mass_u, np.where(finite_u, u, 0.0),
                                                 sigma_u, xi, np.where(finite_u, y, 0.0)), 0.0)
    return f1_part, f2_part


def crps_mixture_array(p, mu, sigma, u, sigma_u, xi, c, y):
    f1_part, f2_part = crps_mixture_parts_array(p, mu, sigma, u, sigma_u, xi, c, y)
    return f1_part + f2_part


def crps_mixture(params: TailedMixtureParams, y: float) -> CrpsBreakdown:
    """Closed-form CRPS of the full mixture at observation ``y >= c``."""
    prm = params
    if y < prm.c:
        raise ParameterDomainError(f"observation {y} lies below the censor point {prm.c}")
    f1_part, f2_part = crps_mixture_parts_array(prm.p, prm.mu, prm.sigma, prm.u, prm.sigma_u,
                                                prm.xi, prm.c, y)
    f1_part, f2_part = float(f1_part), float(f2_part)
    branch = Branch.BELOW_U if y < prm.u else Branch.ABOVE_U
    return CrpsBreakdown(f1_part, f2_part, f1_part + f2_part, branch)


# ---------------------------------------------------------------- baselines

def crps_normal(mu, sigma, y):
    """Closed-form CRPS of N(mu, sigma^2)."""
    sigma_arr = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma_arr <= 0):
        raise ParameterDomainError("sigma must be positive")
    z = (np.asarray(y, dtype=np.float64) - mu) / sigma_arr
    return _scalar_or_array(sigma_arr * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z)
                                         - 1.0 / SQRT_PI))


def crps_ensemble(members: Sequence[float], y: float) -> float:
    """Standard (not fair) ensemble CRPS: E|X - y| - 0.5 E|X - X'|."""
    x = np.asarray(members, dtype=np.float64)
    if x.size == 0:
        raise ParameterDomainError("ensemble must have at least one member")
    return float(crps_ensemble_array(x[None, :], np.asarray([y]))[0])


def crps_ensemble_array(members: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise ensemble CRPS for ``members`` of shape (n, m) and ``y`` of shape (n,)."""
    x = np.sort(np.asarray(members, dtype=np.float64), axis=-1)
    m = x.shape[-1]
    skill = np.abs(x - np.asarray(y, dtype=np.float64)[..., None]).mean(axis=-1)
    # sum_{i,j} |x_i - x_j| for sorted x equals 2 sum_i (2i - m + 1) x_i
    weights = 2.0 * np.arange(m) - m + 1.0
    spread = 2.0 * (x * weights).sum(axis=-1)
    return skill - spread / (2.0 * m * m)


def variant_crps(variant: DistributionVariant, y: float) -> float:
    """CRPS of any supported distribution family."""
    prm = variant.params
    if variant.tag is VariantTag.PLAIN_NORMAL:
        return float(crps_normal(prm.mu, prm.sigma, y))
    return crps_mixture(variant.effective, y).total


def brier_score(prob_norain: float, occurred: bool) -> float:
    if not 0.0 <= prob_norain <= 1.0:
        raise ParameterDomainError(f"probability must lie in [0, 1], got {prob_norain}")
    return (prob_norain - (1.0 if occurred else 0.0)) ** 2


def quantile_score(q, y, alpha: float):
    """Pinball loss ``(1{y <= q} - alpha)(q - y)`` (no factor 2)."""
    if not 0.0 < alpha < 1.0:
        raise ParameterDomainError(f"alpha must lie in (0, 1), got {alpha}")
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return _scalar_or_array(((y <= q).astype(np.float64) - alpha) * (q - y))


# ---------------------------------------------------------------- quadrature oracle

def crps_quadrature_oracle(cdf: Callable[[float], float], y: float, lower: float, upper: float,
                           *, breakpoints: Sequence[float] = (), upper_tail: float = 0.0,
                           tol: float = 1e-8) -> float:
    """Numerically integrate ``(F(x) - 1{y <= x})^2`` over ``[lower, upper]``.

    The range is split at ``y`` and every breakpoint (jumps and kinks of the
    CDF) and each piece is integrated adaptively.  ``upper_tail`` is a
    closed-form value for the integral above ``upper`` and is simply added.
    Raises :class:`OracleFailure` when the summed error estimate exceeds ``tol``.
    """
    if not lower < upper:
        raise ParameterDomainError(f"need lower < upper, got [{lower}, {upper}]")
    cuts = {lower, upper, min(max(y, lower), upper)}
    cuts.update(b for b in breakpoints if lower < b < upper and math.isfinite(b))
    cuts = sorted(cuts)
    total, err = 0.0, 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        if b <= y:
            integrand = lambda x: float(cdf(x)) ** 2  # noqa: E731
        else:
            integrand = lambda x: (1.0 - float(cdf(x))) ** 2  # noqa: E731
        value, abserr = integrate.quad(integrand, a, b, epsabs=tol / len(cuts), epsrel=1e-12,
                                       limit=200)
        total += value
        err += abserr
    if not math.isfinite(total) or err > tol:
        raise OracleFailure(f"quadrature did not converge (error estimate {err:.3e})")
    return total + upper_tail


def gpd_tail_remainder(params: TailedMixtureParams, x: float) -> float:
    """Closed form of the integral of ``(1 - F)^2`` from ``x >= u`` to infinity."""
    prm = params
    if not math.isfinite(prm.u):
        return 0.0
    if x < prm.u:
        raise ParameterDomainError("tail remainder needs x >= u")
    rest = 1.0 - prm.mass_below_threshold
    z = (x - prm.u) / prm.sigma_u
    if abs(prm.xi) < 1e-12:
        decay = math.exp(-2.0 * z)
    else:
        base = 1.0 + prm.xi * z
        if base <= 0:
            return 0.0
        decay = base ** ((prm.xi - 2.0) / prm.xi)
    return rest * rest * prm.sigma_u * decay / (2.0 - prm.xi)


def mixture_crps_quadrature(params: TailedMixtureParams, y: float, tol: float = 1e-8) -> float:
    """Quadrature reference value for :func:`crps_mixture`."""
    prm = params
    top = max(y, mixture_quantile(prm, 1.0 - 1e-9))
    if math.isfinite(prm.u):
        top = max(top, prm.u)
    lower = prm.c - 1.0 if math.isfinite(prm.c) else prm.mu - 40.0 * prm.sigma
    points = [prm.c, prm.u, y] + [prm.mu + k * prm.sigma for k in range(-8, 9)]
    if math.isfinite(prm.u):
        # geometric cuts keep each piece of a heavy GPD tail well resolved
        points += [prm.u + prm.sigma_u * (2.0 ** j - 1.0) for j in range(-4, 80)]
    return crps_quadrature_oracle(lambda x: mixture_cdf(prm, x), y, lower, top,
                                  breakpoints=points, upper_tail=gpd_tail_remainder(prm, top),
                                  tol=tol)
