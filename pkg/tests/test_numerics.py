"""Special functions, confidence bounds, and RNG streams."""

import math

import mpmath
import numpy as np
import pytest

from smoothlab.numerics import (RngStream, clopper_pearson_lower, gaussian_matrix,
                                gaussian_sample, regularized_incomplete_beta,
                                std_normal_cdf, std_normal_quantile)


# ---------------------------------------------------------------------------
# Normal CDF
# ---------------------------------------------------------------------------

def test_cdf_at_zero():
    assert std_normal_cdf(0.0) == 0.5


def test_cdf_against_high_precision_oracle():
    # mpmath ncdf evaluated at 50 digits, rounded to double
    mpmath.mp.dps = 50
    for z in (-4.0, -1.0, -0.3, 0.7, 1.5, 3.2):
        expected = float(mpmath.ncdf(z))
        assert std_normal_cdf(z) == pytest.approx(expected, abs=1e-15)
    assert std_normal_cdf(1.5) == pytest.approx(0.9331927987311419, abs=1e-12)


def test_cdf_symmetry():
    for z in np.linspace(-6, 6, 201):
        assert abs(std_normal_cdf(z) + std_normal_cdf(-z) - 1.0) <= 1e-12


def test_cdf_monotone():
    zs = np.linspace(-8, 8, 400)
    vals = [std_normal_cdf(z) for z in zs]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_cdf_rejects_non_finite():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            std_normal_cdf(bad)


# ---------------------------------------------------------------------------
# Normal quantile
# ---------------------------------------------------------------------------

def test_quantile_median():
    assert std_normal_quantile(0.5) == 0.0


def test_quantile_against_bisection_oracle():
    # independent bisection on the CDF
    def oracle(p, lo=-10.0, hi=10.0):
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if std_normal_cdf(mid) < p:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    for p in (0.9, 0.1, 0.025, 0.993, 0.5001):
        assert std_normal_quantile(p) == pytest.approx(oracle(p), abs=1e-9)
    assert std_normal_quantile(0.9) == pytest.approx(1.2815515655446004, abs=1e-9)


def test_quantile_round_trip_grid():
    for p in np.linspace(1e-6, 1 - 1e-6, 1000):
        z = std_normal_quantile(p)
        assert abs(std_normal_cdf(z) - p) <= 1e-9


def test_quantile_cdf_round_trip_at_one():
    assert std_normal_quantile(std_normal_cdf(1.0)) == pytest.approx(1.0, abs=1e-9)


def test_quantile_domain_errors():
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValueError):
            std_normal_quantile(bad)


# ---------------------------------------------------------------------------
# Regularized incomplete beta
# ---------------------------------------------------------------------------

def test_betainc_uniform_case():
    assert regularized_incomplete_beta(1, 1, 0.3) == pytest.approx(0.3, abs=1e-12)


def test_betainc_symmetric_half():
    assert regularized_incomplete_beta(2, 2, 0.5) == pytest.approx(0.5, abs=1e-12)


def _betainc_quadrature(a, b, x):
    # adaptive integration of the beta density, independent of the
    # continued-fraction path
    mpmath.mp.dps = 30
    num = mpmath.quad(lambda t: t ** (a - 1) * (1 - t) ** (b - 1), [0, x])
    return float(num / mpmath.beta(a, b))


def test_betainc_against_quadrature():
    assert regularized_incomplete_beta(3.5, 7.2, 0.4) == pytest.approx(
        _betainc_quadrature(3.5, 7.2, 0.4), abs=1e-12)


def test_betainc_random_triples_match_quadrature():
    gen = RngStream(2024).generator()
    for _ in range(100):
        a = float(gen.uniform(0.2, 20.0))
        b = float(gen.uniform(0.2, 20.0))
        x = float(gen.uniform(0.001, 0.999))
        assert regularized_incomplete_beta(a, b, x) == pytest.approx(
            _betainc_quadrature(a, b, x), abs=1e-10)


def test_betainc_endpoints_and_monotonicity():
    assert regularized_incomplete_beta(2.3, 4.5, 0.0) == 0.0
    assert regularized_incomplete_beta(2.3, 4.5, 1.0) == 1.0
    xs = np.linspace(0, 1, 101)
    vals = [regularized_incomplete_beta(2.3, 4.5, x) for x in xs]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_betainc_domain_errors():
    with pytest.raises(ValueError):
        regularized_incomplete_beta(0.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.0, -2.0, 0.5)
    with pytest.raises(ValueError):
        regularized_incomplete_beta(1.0, 1.0, 1.5)


# ---------------------------------------------------------------------------
# Clopper-Pearson lower bound
# ---------------------------------------------------------------------------

def binomial_tail_oracle(k, n, alpha):
    """Solve P[Bin(n, p) >= k] = alpha by bisection with direct tail summation."""
    def tail(p):
        if p <= 0.0:
            return 0.0 if k > 0 else 1.0
        if p >= 1.0:
            return 1.0
        lp, lq = math.log(p), math.log1p(-p)
        total = 0.0
        for i in range(k, n + 1):
            total += math.exp(math.lgamma(n + 1) - math.lgamma(i + 1)
                              - math.lgamma(n - i + 1) + i * lp + (n - i) * lq)
        return total

    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if tail(mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def test_cp_zero_successes():
    assert clopper_pearson_lower(0, 100, 0.001) == 0.0


def test_cp_all_successes_closed_form():
    assert clopper_pearson_lower(100, 100, 0.001) == pytest.approx(0.001 ** 0.01, abs=1e-12)


def test_cp_against_exact_tail_oracle():
    assert clopper_pearson_lower(73, 100, 0.05) == pytest.approx(
        binomial_tail_oracle(73, 100, 0.05), abs=1e-10)


def test_cp_random_cases_match_oracle():
    gen = RngStream(7).generator()
    for _ in range(60):
        n = int(gen.integers(1, 400))
        k = int(gen.integers(1, n + 1))
        alpha = float(gen.uniform(0.0005, 0.3))
        assert clopper_pearson_lower(k, n, alpha) == pytest.approx(
            binomial_tail_oracle(k, n, alpha), abs=1e-10)


def test_cp_below_mle():
    gen = RngStream(8).generator()
    for _ in range(200):
        n = int(gen.integers(1, 200))
        k = int(gen.integers(0, n + 1))
        assert clopper_pearson_lower(k, n, 0.05) <= k / n + 1e-12


def test_cp_monotone_in_k_and_alpha():
    alphas = (0.001, 0.01, 0.05, 0.2)
    for n in range(1, 51):
        for alpha in alphas:
            vals = [clopper_pearson_lower(k, n, alpha) for k in range(n + 1)]
            assert all(b >= a - 1e-13 for a, b in zip(vals, vals[1:]))
        for k in range(n + 1):
            by_alpha = [clopper_pearson_lower(k, n, a) for a in alphas]
            # larger alpha (weaker confidence) never lowers the bound
            assert all(b >= a - 1e-13 for a, b in zip(by_alpha, by_alpha[1:]))


def test_cp_coverage_simulation():
    p, n, alpha = 0.8, 500, 0.05
    gen = RngStream(11).generator()
    ks = gen.binomial(n, p, size=2000)
    violations = sum(clopper_pearson_lower(int(k), n, alpha) > p for k in ks)
    assert violations / 2000 <= alpha + 0.01


def test_cp_domain_errors():
    with pytest.raises(ValueError):
        clopper_pearson_lower(-1, 10, 0.05)
    with pytest.raises(ValueError):
        clopper_pearson_lower(11, 10, 0.05)
    with pytest.raises(ValueError):
        clopper_pearson_lower(5, 10, 0.0)


# ---------------------------------------------------------------------------
# RNG streams and Gaussian sampling
# ---------------------------------------------------------------------------

def test_stream_determinism():
    s = RngStream(42, 7)
    a = gaussian_sample(s, 16, 1.3)
    b = gaussian_sample(s, 16, 1.3)
    assert np.array_equal(a, b)


def test_distinct_streams_differ():
    root = RngStream(42)
    a = gaussian_sample(root.child("x", 1), 16, 1.0)
    b = gaussian_sample(root.child("x", 2), 16, 1.0)
    c = gaussian_sample(root.child("y", 1), 16, 1.0)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_labels_are_typed():
    with pytest.raises(TypeError):
        RngStream(1).child(3.5)
    with pytest.raises(ValueError):
        RngStream(1).child()


def test_zero_sigma_gives_zero_vector():
    assert np.array_equal(gaussian_sample(RngStream(5), 10, 0.0), np.zeros(10))


def test_gaussian_moments():
    draws = gaussian_matrix(RngStream(123).child("lln"), 100_000, 1, 1.0).ravel()
    assert abs(draws.mean()) <= 4 / math.sqrt(100_000)
    assert abs(draws.var() - 1.0) <= 0.05


def test_gaussian_domain_errors():
    with pytest.raises(ValueError):
        gaussian_sample(RngStream(1), 0, 1.0)
    with pytest.raises(ValueError):
        gaussian_sample(RngStream(1), 3, -0.5)
    with pytest.raises(ValueError):
        gaussian_sample(RngStream(1), 3, math.nan)
