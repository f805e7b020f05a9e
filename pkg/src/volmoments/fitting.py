"""Moment-matched laws for realized variance and their capped expectations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

ZERO_VARIANCE_RTOL = 1e-10
RHO_CLAMP_TOL = 1e-8


class FitError(ValueError):
    pass


class ZeroVariance(FitError):
    pass


class NonPositiveSkew(FitError):
    pass


class CorrelationOutOfRange(FitError):
    pass


class UnsupportedPayoff(FitError):
    pass


class QuadratureError(FitError):
    pass


def _check_variance(m1: float, m2: float) -> None:
    if not m1 > 0:
        raise ZeroVariance(f"first moment must be positive, got {m1}")
    if m2 <= m1 * m1 * (1 + ZERO_VARIANCE_RTOL):
        raise ZeroVariance(f"no variance: m2={m2} vs m1^2={m1 * m1}")


@dataclass(frozen=True)
class ChiSquareFit:
    """``X = scale * chi2(a)``."""

    a: float
    scale: float

    @property
    def mean(self) -> float:
        return self.a * self.scale

    @property
    def variance(self) -> float:
        return 2 * self.a * self.scale ** 2

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        h = self.a / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = (h - 1) * np.log(x / (2 * self.scale)) - x / (2 * self.scale) - special.gammaln(h)
            return np.where(x > 0, np.exp(logf) / (2 * self.scale), 0.0)

    def cdf(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        return special.gammainc(self.a / 2, x / (2 * self.scale))


@dataclass(frozen=True)
class LogNormalFit:
    mu: float
    sigma: float

    @property
    def mean(self) -> float:
        return math.exp(self.mu + self.sigma ** 2 / 2)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(x) - self.mu) / self.sigma
            return np.where(x > 0, np.exp(-0.5 * z * z) / (x * self.sigma * math.sqrt(2 * math.pi)), 0.0)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(x > 0, special.ndtr((np.log(np.maximum(x, 1e-300)) - self.mu) / self.sigma), 0.0)


@dataclass(frozen=True)
class PearsonIIIFit:
    """``X = a + b * Gamma(p)`` on ``[a, inf)``."""

    a: float
    b: float
    p: float

    @property
    def mean(self) -> float:
        return self.a + self.b * self.p

    def moments(self) -> tuple:
        m1 = self.a + self.b * self.p
        m2 = m1 ** 2 + self.b ** 2 * self.p
        m3 = m1 ** 3 + 3 * self.b ** 2 * self.p * m1 + 2 * self.b ** 3 * self.p
        return m1, m2, m3

    def pdf(self, x):
        z = (np.asarray(x, dtype=float) - self.a) / self.b
        with np.errstate(divide="ignore", invalid="ignore"):
            logf = (self.p - 1) * np.log(z) - z - special.gammaln(self.p)
            return np.where(z > 0, np.exp(logf) / self.b, 0.0)

    def cdf(self, x):
        z = np.maximum((np.asarray(x, dtype=float) - self.a) / self.b, 0.0)
        return special.gammainc(self.p, z)


@dataclass(frozen=True)
class DeterministicFit:
    """Degenerate law used when a bridge shows no measurable variance."""

    value: float

    @property
    def mean(self) -> float:
        return self.value

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.value, 1.0, 0.0)


@dataclass(frozen=True)
class BivariateLogNormalFit:
    mu1: float
    sigma1: float
    mu2: float
    sigma2: float
    rho: float

    def pdf(self, x1, x2):
        x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
        z1 = (np.log(x1) - self.mu1) / self.sigma1
        z2 = (np.log(x2) - self.mu2) / self.sigma2
        q = 1 - self.rho ** 2
        norm = 2 * math.pi * self.sigma1 * self.sigma2 * math.sqrt(q) * x1 * x2
        return np.exp(-(z1 * z1 - 2 * self.rho * z1 * z2 + z2 * z2) / (2 * q)) / norm


def fit_chi_square(m1: float, m2: float) -> ChiSquareFit:
    _check_variance(m1, m2)
    a = 2 * m1 * m1 / (m2 - m1 * m1)
    return ChiSquareFit(a, m1 / a)


def fit_lognormal(m1: float, m2: float) -> LogNormalFit:
    _check_variance(m1, m2)
    return LogNormalFit(math.log(m1 * m1 / math.sqrt(m2)), math.sqrt(math.log(m2 / (m1 * m1))))


def fit_pearson3(m1: float, m2: float, m3: float) -> PearsonIIIFit:
    var = m2 - m1 * m1
    if var <= abs(m1 * m1) * ZERO_VARIANCE_RTOL or var <= 0:
        raise ZeroVariance(f"no variance: m2={m2} vs m1^2={m1 * m1}")
    skew = m3 + 2 * m1 ** 3 - 3 * m1 * m2
    if skew <= 1e-10 * var ** 1.5:
        raise NonPositiveSkew(f"third central moment {skew} is not positive")
    return PearsonIIIFit(m1 - 2 * var * var / skew, skew / (2 * var), 4 * var ** 3 / skew ** 2)


def fit_bivariate_lognormal(m10: float, m20: float, m01: float, m02: float,
                            m11: float) -> BivariateLogNormalFit:
    f1 = fit_lognormal(m10, m20)
    f2 = fit_lognormal(m01, m02)
    rho = math.log(m11 / (m10 * m01)) / (f1.sigma * f2.sigma)
    if abs(rho) > 1 + RHO_CLAMP_TOL:
        raise CorrelationOutOfRange(f"implied correlation {rho:.6f} outside [-1, 1]")
    return BivariateLogNormalFit(f1.mu, f1.sigma, f2.mu, f2.sigma, max(-1.0, min(1.0, rho)))


def _lognormal_capped(mu: float, sigma: float, cap: float, sqrt: bool) -> float:
    if sqrt:
        mu, sigma, cap = mu / 2, sigma / 2, math.sqrt(cap)
    if sigma == 0:
        return min(math.exp(mu), cap)
    lc = math.log(cap)
    return (math.exp(mu + sigma ** 2 / 2) * special.ndtr((lc - mu - sigma ** 2) / sigma)
            + cap * special.ndtr(-(lc - mu) / sigma))


def capped_expectation(fit, payoff: str, cap: float) -> float:
    """``E[min(X, cap)]`` for payoff "RV" or ``E[min(sqrt X, sqrt cap)]`` for "sqrtRV"."""
    if payoff not in ("RV", "sqrtRV"):
        raise UnsupportedPayoff(f"unknown payoff {payoff!r}")
    if cap < 0:
        raise FitError(f"cap must be non-negative, got {cap}")
    sqrt = payoff == "sqrtRV"
    if cap == 0:
        return 0.0
    if isinstance(fit, DeterministicFit):
        v = min(fit.value, cap)
        return math.sqrt(v) if sqrt else v
    if isinstance(fit, ChiSquareFit):
        a, scale = fit.a, fit.scale
        if math.isinf(cap):
            if sqrt:
                return math.sqrt(2 * scale) * math.exp(special.gammaln((a + 1) / 2) - special.gammaln(a / 2))
            return fit.mean
        k = cap / scale
        q = special.gammaincc(a / 2, k / 2)
        if sqrt:
            ratio = math.exp(special.gammaln((a + 1) / 2) - special.gammaln(a / 2))
            return math.sqrt(scale) * (math.sqrt(k) * q
                                       + math.sqrt(2) * ratio * special.gammainc((a + 1) / 2, k / 2))
        return scale * (k * q + a * special.gammainc(a / 2 + 1, k / 2))
    if isinstance(fit, LogNormalFit):
        if math.isinf(cap):
            return math.exp(fit.mu / 2 + fit.sigma ** 2 / 8) if sqrt else fit.mean
        return _lognormal_capped(fit.mu, fit.sigma, cap, sqrt)
    if isinstance(fit, PearsonIIIFit):
        if sqrt:
            raise UnsupportedPayoff("no capped sqrt payoff for the Pearson III fit")
        if math.isinf(cap):
            return fit.mean
        z = (cap - fit.a) / fit.b
        if z <= 0:
            return cap
        q = special.gammaincc(fit.p, z)
        g = math.exp(fit.p * math.log(z) - z - special.gammaln(fit.p))
        return fit.mean + (cap - fit.mean) * q - fit.b * g
    raise UnsupportedPayoff(f"unsupported fit {type(fit).__name__}")


def cdf(fit, x: float) -> float:
    return float(fit.cdf(x))


def ratio_expectation(bfit: BivariateLogNormalFit) -> float:
    """``E[X1 / X2]`` under the bivariate log-normal fit."""
    return math.exp(bfit.mu1 + bfit.sigma1 ** 2 / 2 - bfit.mu2 + bfit.sigma2 ** 2 / 2
                    - bfit.rho * bfit.sigma1 * bfit.sigma2)


def ratio_expectation_from_moments(m10: float, m20: float, m01: float, m02: float, m11: float) -> float:
    """Same quantity written directly in the matched moments; stays finite as X2 turns deterministic."""
    return m10 * m10 * m02 / (m01 * m01 * m11)


def capped_ratio_expectation(bfit: BivariateLogNormalFit, cap: float, n: int = 64,
                             tol: float = 1e-6, max_n: int = 1024, width: float = 10.0) -> float:
    """``E[min(X1 / X2, cap)]`` by nested quadrature.

    Conditional on ``log X2`` the ratio is log-normal, so the inner integral is a
    closed-form capped expectation; the outer one is Gauss-Legendre over the
    standardised ``log X2`` on ``[-width, width]``, doubled until two successive
    rules agree to ``tol``.
    """
    if cap < 0:
        raise FitError(f"cap must be non-negative, got {cap}")
    if cap == 0:
        return 0.0
    if math.isinf(cap):
        return ratio_expectation(bfit)
    s_cond = bfit.sigma1 * math.sqrt(max(1 - bfit.rho ** 2, 0.0))

    def rule(m):
        u, w = np.polynomial.legendre.leggauss(m)
        u, w = width * u, width * w
        dens = np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi)
        mu_r = bfit.mu1 - bfit.mu2 + (bfit.rho * bfit.sigma1 - bfit.sigma2) * u
        inner = np.array([_lognormal_capped(m_, s_cond, cap, False) for m_ in mu_r])
        return float(np.sum(w * dens * inner))

    prev = rule(n)
    while n < max_n:
        n *= 2
        cur = rule(n)
        if abs(cur - prev) <= tol:
            return cur
        prev = cur
    raise QuadratureError(f"capped ratio quadrature did not reach tolerance {tol} with {max_n} nodes")
