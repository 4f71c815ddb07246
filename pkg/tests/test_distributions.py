import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tailcast.distributions import (
    CENSOR_POINT,
    DistributionVariant,
    TailedMixtureParams,
    VariantTag,
    exceedance_probability,
    gpd_cdf,
    mixture_cdf,
    mixture_cdf_array,
    mixture_quantile,
    mixture_sample,
)
from tailcast.errors import ParameterDomainError, UnsupportedShapeError

C = math.log(0.01)
REF = TailedMixtureParams(p=0.3, mu=0.0, sigma=1.0, u=1.0, sigma_u=1.0, xi=0.5, c=C)


def scipy_cdf(prm, y):
    """Independent reference built from scipy.stats distributions."""
    if y < prm.c:
        return 0.0
    body = lambda t: prm.p + (1 - prm.p) * stats.norm.cdf(t, prm.mu, prm.sigma)  # noqa: E731
    if y <= prm.u:
        return body(y)
    fu = body(prm.u)
    return fu + (1 - fu) * stats.genpareto.cdf(y - prm.u, prm.xi, scale=prm.sigma_u)


def random_params(rng):
    mu = rng.uniform(-2, 2)
    sigma = rng.uniform(0.1, 3)
    return TailedMixtureParams(rng.uniform(0, 0.95), mu, sigma, mu + rng.uniform(0.5, 3) * sigma,
                               rng.uniform(0.1, 3), rng.uniform(0, 0.9), C)


def test_reference_cdf_value():
    assert mixture_cdf(REF, 1.0) == pytest.approx(0.888941, abs=5e-7)


def test_exceedance_of_one_in_transformed_space():
    assert exceedance_probability(REF, math.e - 0.01) == pytest.approx(0.111059, abs=5e-7)


def test_cdf_agrees_with_scipy():
    rng = np.random.default_rng(11)
    for _ in range(200):
        prm = random_params(rng)
        for y in (prm.c - 0.5, prm.c, prm.mu, prm.u, prm.u + rng.exponential(2.0)):
            assert mixture_cdf(prm, y) == pytest.approx(scipy_cdf(prm, y), abs=1e-12)


@pytest.mark.parametrize("args, expected", [
    ((0.0, 1.0, 0.0, 1.0), 1 - math.exp(-1)),
    ((0.0, 1.0, 0.5, 2.0), 0.75),
    ((0.0, 1.0, 0.5, 0.0), 0.0),
])
def test_gpd_cdf_values(args, expected):
    assert gpd_cdf(*args) == pytest.approx(expected, abs=1e-15)


def test_gpd_below_threshold_rejected():
    with pytest.raises(ParameterDomainError):
        gpd_cdf(1.0, 1.0, 0.3, 0.5)


def test_gpd_negative_shape_saturates_past_endpoint():
    assert gpd_cdf(0.0, 1.0, -0.5, 3.0) == 1.0


def test_quantile_inside_point_mass():
    prm = TailedMixtureParams(0.5, 0.0, 1.0, math.inf, c=0.0)
    assert mixture_quantile(prm, 0.3) == 0.0


def test_quantile_of_plain_normal_median():
    prm = TailedMixtureParams(0.0, 0.0, 1.0, math.inf, c=-math.inf)
    assert mixture_quantile(prm, 0.5) == 0.0


def test_quantile_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(300):
        prm = random_params(rng)
        tau = rng.uniform(prm.jump_at_censor + 1e-6, 1 - 1e-6)
        assert mixture_cdf(prm, mixture_quantile(prm, tau)) == pytest.approx(tau, abs=1e-8)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_quantile_rejects_out_of_range_levels(tau):
    with pytest.raises(ParameterDomainError):
        mixture_quantile(REF, tau)


@pytest.mark.parametrize("kwargs, err", [
    (dict(p=1.2), ParameterDomainError),
    (dict(sigma=0.0), ParameterDomainError),
    (dict(sigma_u=-1.0), ParameterDomainError),
    (dict(xi=1.0), UnsupportedShapeError),
    (dict(u=C), ParameterDomainError),
    (dict(mu=math.nan), ParameterDomainError),
])
def test_invalid_parameters_rejected(kwargs, err):
    base = REF.as_dict() | kwargs
    with pytest.raises(err):
        TailedMixtureParams(**base)


def test_boundary_behaviour():
    assert mixture_cdf(REF, C - 1e-9) == 0.0
    assert mixture_cdf(REF, C) == pytest.approx(REF.jump_at_censor, abs=1e-12)
    assert 1.0 - mixture_cdf(REF, 1e12) < 1e-10
    assert mixture_cdf(REF, REF.u) == pytest.approx(REF.mass_below_threshold, abs=1e-12)


def test_full_point_mass_is_degenerate():
    prm = TailedMixtureParams(1.0, 0.0, 1.0, 1.0, c=C)
    assert mixture_cdf(prm, C) == pytest.approx(1.0, abs=1e-12)
    assert np.all(mixture_sample(prm, 3, 1000) == C)


def test_sampling_is_reproducible():
    a = mixture_sample(REF, 42, 500)
    b = mixture_sample(REF, 42, 500)
    assert a.tobytes() == b.tobytes()


def test_sampled_point_mass_fraction():
    # censor far below the body: the jump is p up to ~1e-9
    prm = TailedMixtureParams(0.5, 5.0, 1.0, 8.0, c=C)
    draws = mixture_sample(prm, 7, 100_000)
    assert abs(np.mean(draws == C) - 0.5) < 0.01


def test_samples_match_cdf():
    draws = np.sort(mixture_sample(REF, 9, 100_000))
    n = draws.size
    cont = draws[draws > C]
    ecdf_hi = np.searchsorted(draws, cont, side="right") / n
    ecdf_lo = np.searchsorted(draws, cont, side="left") / n
    f = mixture_cdf(REF, cont)
    ks = max(np.max(np.abs(ecdf_hi - f)), np.max(np.abs(ecdf_lo - f)))
    assert ks < 0.01


def test_variant_effective_parameters():
    plain = DistributionVariant(VariantTag.PLAIN_NORMAL, REF)
    assert plain.cdf(0.0) == pytest.approx(0.5)
    point = DistributionVariant("NormalPointMass", REF)
    assert point.effective.u == math.inf
    assert point.cdf(5.0) == pytest.approx(0.3 + 0.7 * stats.norm.cdf(5.0))


@settings(max_examples=150, deadline=None)
@given(p=st.floats(0, 0.99), mu=st.floats(-3, 3), sigma=st.floats(0.05, 4),
       k=st.floats(0.2, 4), sigma_u=st.floats(0.05, 4), xi=st.floats(-0.4, 0.95))
def test_cdf_monotone_and_bounded(p, mu, sigma, k, sigma_u, xi):
    prm = TailedMixtureParams(p, mu, sigma, max(mu + k * sigma, C + 0.1), sigma_u, xi, C)
    grid = np.linspace(C - 1, prm.u + 20 * sigma_u, 400)
    f = mixture_cdf_array(p, mu, sigma, prm.u, sigma_u, xi, C, grid)
    assert np.all(np.diff(f) >= -1e-15)
    assert np.all((f >= 0) & (f <= 1))


def test_censor_constant():
    assert CENSOR_POINT == pytest.approx(-4.605170185988091)


def test_far_left_and_far_right_limits():
    rng = np.random.default_rng(12)
    for _ in range(50):
        prm = random_params(rng)
        assert mixture_cdf(prm, prm.c - 10 * prm.sigma) == 0.0
        assert mixture_cdf(prm, mixture_quantile(prm, 1 - 1e-8)) >= 1 - 1e-6


def test_continuity_at_threshold():
    above = np.nextafter(REF.u, np.inf)
    assert mixture_cdf(REF, above) == pytest.approx(REF.mass_below_threshold, abs=1e-14)


def test_quantile_of_cdf_never_exceeds_argument():
    rng = np.random.default_rng(13)
    for _ in range(100):
        prm = random_params(rng)
        for y in (prm.c, prm.c + 0.1, prm.mu, prm.u, prm.u + 3 * prm.sigma_u):
            tau = mixture_cdf(prm, y)
            if 0 < tau < 1:
                q = mixture_quantile(prm, tau)
                # just above the jump F(y) - p can be below the resolution of tau itself
                assert q <= y + 1e-9 * max(1.0, abs(y)) or \
                    abs(mixture_cdf(prm, q) - tau) <= 4 * np.spacing(tau)


def test_no_mass_no_tail_is_plain_normal():
    prm = TailedMixtureParams(0.0, 0.4, 1.3, math.inf, c=C)
    ys = np.linspace(C, 6, 200)
    assert np.allclose(mixture_cdf(prm, ys), stats.norm.cdf(ys, 0.4, 1.3), atol=1e-12, rtol=0)
