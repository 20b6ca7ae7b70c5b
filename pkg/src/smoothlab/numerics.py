"""Special functions, binomial confidence bounds, and reproducible RNG streams.

Everything here is deterministic 64-bit floating point.  Random sampling is
counter-based: a stream is fully identified by ``(seed, stream_id)`` and any
number of statistically independent child streams can be derived from it
without sequential splitting, so results never depend on evaluation order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

_SQRT2 = math.sqrt(2.0)
_U64 = 1 << 64


class NonFiniteError(RuntimeError):
    """A numeric quantity became non-finite where the computation cannot proceed."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RngStream:
    """A counter-based random stream identified by ``(seed, stream_id)``.

    The same ``(seed, stream_id)`` pair yields the same sample sequence on
    every platform (Philox4x64 keyed by both values).  Streams are single
    owner: to draw independently in parallel, derive child streams with
    :meth:`child` instead of sharing one generator.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.seed < _U64):
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not (0 <= self.stream_id < _U64):
            raise ValueError(f"stream_id must be an unsigned 64-bit integer, got {self.stream_id}")

    def child(self, *labels: int | str) -> "RngStream":
        """Derive an independent stream keyed by a sequence of labels.

        Labels may be non-negative integers (e.g. sample indices) or short
        strings (e.g. experiment phases).  The derivation hashes the parent
        stream_id together with the labels, so distinct label paths yield
        distinct, independent streams under the same seed.
        """
        if not labels:
            raise ValueError("child() requires at least one label")
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for lab in labels:
            if isinstance(lab, str):
                h.update(b"s" + lab.encode("utf-8") + b"\x00")
            elif isinstance(lab, (int, np.integer)):
                h.update(b"i" + (int(lab) % _U64).to_bytes(8, "little"))
            else:
                raise TypeError(f"stream labels must be int or str, got {type(lab).__name__}")
        return RngStream(self.seed, int.from_bytes(h.digest(), "little"))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def gaussian_sample(rng: RngStream, dim: int, sigma: float) -> np.ndarray:
    """Draw one i.i.d. N(0, sigma^2 I) vector of length ``dim`` from the stream.

    Pure in the stream: calling twice with the same stream returns the same
    vector.  ``sigma = 0`` returns the zero vector.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be finite and non-negative, got {sigma}")
    return rng.generator().normal(0.0, sigma, size=dim)


def gaussian_matrix(rng: RngStream, n: int, dim: int, sigma: float) -> np.ndarray:
    """Like :func:`gaussian_sample` but returns an ``(n, dim)`` matrix in one draw."""
    if n < 1 or dim < 1:
        raise ValueError(f"n and dim must be >= 1, got n={n} dim={dim}")
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be finite and non-negative, got {sigma}")
    return rng.generator().normal(0.0, sigma, size=(n, dim))


# ---------------------------------------------------------------------------
# Standard normal CDF and quantile
# ---------------------------------------------------------------------------

def std_normal_cdf(z: float) -> float:
    """Standard normal CDF Phi(z)."""
    if not math.isfinite(z):
        raise ValueError(f"std_normal_cdf requires finite input, got {z}")
    return 0.5 * math.erfc(-z / _SQRT2)


# Acklam's rational approximation to the normal quantile (|rel err| < 1.15e-9),
# refined below by one Newton step on Phi to reach full double precision.
_ACKLAM_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
             1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_ACKLAM_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
             6.680131188771972e+01, -1.328068155288572e+01)
_ACKLAM_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
             -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_ACKLAM_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
             3.754408661907416e+00)
_ACKLAM_LOW = 0.02425


def std_normal_quantile(p: float) -> float:
    """Inverse of the standard normal CDF.

    Requires 0 < p < 1 strictly; the caller decides what an out-of-range
    probability means (e.g. abstention) before invoking.
    """
    if not (0.0 < p < 1.0):
        raise ValueError(f"std_normal_quantile requires 0 < p < 1, got {p}")
    a, b, c, d = _ACKLAM_A, _ACKLAM_B, _ACKLAM_C, _ACKLAM_D
    if p < _ACKLAM_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    elif p <= 1.0 - _ACKLAM_LOW:
        q = p - 0.5
        r = q * q
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / \
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / \
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
    # One Newton step: x' = x - (Phi(x) - p) / phi(x).
    pdf = math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    if pdf > 0.0:
        x -= (std_normal_cdf(x) - p) / pdf
    return x


# ---------------------------------------------------------------------------
# Regularized incomplete beta and the Clopper-Pearson lower bound
# ---------------------------------------------------------------------------

_BETA_MAX_ITER = 500
_BETA_EPS = 1e-16
_BETA_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ValueError(f"incomplete beta continued fraction failed to converge for a={a} b={b} x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0) or not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError(f"shape parameters must be positive and finite, got a={a} b={b}")
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided 1-alpha exact lower confidence bound for a binomial proportion.

    Solves I_p(k, n-k+1) = alpha for p via bisection on the regularized
    incomplete beta (the beta-quantile identity for the exact binomial tail
    P[Bin(n, p) >= k]).  Returns 0 when k = 0.
    """
    if n < 1 or not (0 <= k <= n):
        raise ValueError(f"counts must satisfy 0 <= k <= n, n >= 1; got k={k} n={n}")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie strictly in (0, 1), got {alpha}")
    if k == 0:
        return 0.0
    a = float(k)
    b = float(n - k + 1)
    lo, hi = 0.0, 1.0
    # 100 halvings push the bracket well below 1e-12 everywhere in [0, 1].
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if regularized_incomplete_beta(a, b, mid) < alpha:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
