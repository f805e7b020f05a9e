"""Contract pricing from bridge moments and moment-matched fits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, is_dataclass
from typing import Optional

import numpy as np
from scipy import special
from scipy.optimize import brentq

from . import fitting
from .fitting import (
    ChiSquareFit, DeterministicFit, FitError, LogNormalFit, NonPositiveSkew, ZeroVariance,
    capped_expectation, capped_ratio_expectation, fit_bivariate_lognormal, fit_chi_square,
    fit_lognormal, fit_pearson3, ratio_expectation, ratio_expectation_from_moments,
)
from .moments import (
    DEFAULT_EPS, TRANSITION_FLOOR, Corridor, bivariate_moments, build_functional, moments_exact,
    moments_fd,
)

CONTRACT_KINDS = ("varianceSwap", "volatilitySwap", "corridorVarianceSwap", "conditionalVarianceSwap",
                  "gammaSwap", "rvOption", "varianceKnockout")
FIT_FAMILIES = ("chiSquare", "logNormal", "pearson3")


class PricingError(ValueError):
    pass


@dataclass(frozen=True)
class ContractSpec:
    kind: str
    T: float = 0.0
    t: float = 1.0
    cap_factor: Optional[float] = 6.2
    cap: Optional[float] = None
    corridor: Optional[Corridor] = None
    strike: Optional[float] = None
    barrier: Optional[float] = None
    fit_family: str = "chiSquare"
    name: str = ""

    def __post_init__(self):
        if self.kind not in CONTRACT_KINDS:
            raise PricingError(f"unknown contract kind {self.kind!r}")
        if not self.T < self.t:
            raise PricingError(f"issuance T={self.T} must precede maturity t={self.t}")
        if self.cap_factor is not None and not self.cap_factor > 1:
            raise PricingError(f"cap factor must exceed 1, got {self.cap_factor}")
        if self.fit_family not in FIT_FAMILIES:
            raise PricingError(f"unknown fit family {self.fit_family!r}")

    @property
    def duration(self) -> float:
        return self.t - self.T

    @property
    def capped(self) -> bool:
        if self.cap is not None:
            return not math.isinf(self.cap)
        return self.cap_factor is not None and not math.isinf(self.cap_factor)


@dataclass(frozen=True)
class PricingOptions:
    eps_base: float = DEFAULT_EPS
    method: str = "fd"
    literal_rv_max: bool = False
    indicator: str = "source"
    gamma_weight: str = "ratio"
    spot_weight: bool = False
    root_finder: bool = False
    transition_floor: float = TRANSITION_FLOOR
    occupation_floor: float = 1e-6


@dataclass
class BridgeRow:
    y2: int
    weight: float
    payoff: float
    fit: object = None
    moments: tuple = ()


@dataclass
class PriceReport:
    """Headline value plus the per-bridge rows it is summed from."""

    contract: ContractSpec
    headline: float
    aggregation: str
    rows: list
    diagnostics: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def resum(self) -> float:
        w = np.array([r.weight for r in self.rows])
        p = np.array([r.payoff for r in self.rows])
        rule = self.aggregation
        if rule == "sum":
            return float(w @ p)
        if rule == "sqrt_sum":
            return math.sqrt(max(float(w @ p), 0.0))
        if rule == "sqrt_ratio":
            return math.sqrt(max(float(w @ p) / float(w.sum()), 0.0)) if w.sum() > 0 else 0.0
        if rule == "rv_call":
            return _rv_call(self.rows, self.contract.strike, self.extras["discount"],
                            self.contract.duration)[0]
        if rule in ("root_var", "root_vol"):
            return _equilibrium(self.rows, self.contract.cap_factor, rule == "root_vol")
        raise PricingError(f"unknown aggregation {rule!r}")

    def summary(self) -> dict:
        return {
            "name": self.contract.name,
            "kind": self.contract.kind,
            "T": self.contract.T,
            "t": self.contract.t,
            "headline": self.headline,
            "aggregation": self.aggregation,
            "diagnostics": self.diagnostics,
            "extras": self.extras,
        }

    def write_rows(self, writer, prefix=()) -> None:
        for r in self.rows:
            writer.writerow(list(prefix) + [r.y2, repr(r.weight), repr(r.payoff), _fit_name(r.fit),
                                            json.dumps(_fit_params(r.fit))]
                            + [repr(float(m)) for m in r.moments])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y2", "weight", "payoff", "fit", "params", "m1", "m2", "m3"])
            self.write_rows(w)


def _fit_name(fit) -> str:
    return "" if fit is None else type(fit).__name__


def _fit_params(fit) -> dict:
    if fit is None or not is_dataclass(fit):
        return {}
    return {k: float(v) for k, v in asdict(fit).items()}


def _cached(model, key, build):
    return model.cache.get(("pricing",) + key, build)


def _functional(model, kind, corridor, opts, gamma_weight=None):
    gw = gamma_weight or opts.gamma_weight
    key = ("functional", kind, corridor, opts.indicator, gw, opts.spot_weight)
    return _cached(model, key, lambda: build_functional(kind, model, corridor, indicator=opts.indicator,
                                                        gamma_weight=gw, spot_weight=opts.spot_weight))


def _moments(model, kind, corridor, spec, opts, order, gamma_weight=None):
    f = _functional(model, kind, corridor, opts, gamma_weight)
    key = ("moments", kind, corridor, opts.indicator, gamma_weight or opts.gamma_weight, opts.spot_weight,
           spec.T, spec.t, order, opts.method, opts.eps_base, opts.transition_floor)

    def build():
        if opts.method == "exact":
            return moments_exact(model, f, spec.T, spec.t, order, floor=opts.transition_floor)
        return moments_fd(model, f, spec.T, spec.t, order, eps_base=opts.eps_base,
                          floor=opts.transition_floor)
    return _cached(model, key, build)


def fit_bridge(family: str, m1: float, m2: float, m3: Optional[float] = None, stats: Optional[dict] = None):
    """Fit one bridge with the fallback chain Pearson III -> chi-square -> deterministic."""
    stats = stats if stats is not None else {}
    if family == "pearson3":
        try:
            return fit_pearson3(m1, m2, m3)
        except NonPositiveSkew:
            stats["pearson_to_chi"] = stats.get("pearson_to_chi", 0) + 1
            family = "chiSquare"
        except ZeroVariance:
            pass
    try:
        if family == "chiSquare":
            return fit_chi_square(m1, m2)
        if family == "logNormal":
            return fit_lognormal(m1, m2)
    except ZeroVariance:
        pass
    stats["deterministic"] = stats.get("deterministic", 0) + 1
    return DeterministicFit(max(m1, 0.0))


def _rv_bridges(model, spec, opts, kind="variance", corridor=None, need_fit=True):
    """Per-bridge normalised RV moments (RV = I / duration) and fits."""
    order = 3 if spec.fit_family == "pearson3" else 2
    bm = _moments(model, kind, corridor, spec, opts, order if need_fit else 1)
    d = spec.duration
    u = bm.transition
    keep = u > opts.transition_floor
    norm = bm.normalized
    stats = {"skipped_mass": float(u[~keep].sum()), "bridges": int(keep.sum())}
    rows = []
    for y2 in np.flatnonzero(keep):
        m = tuple(norm[k, y2] / d ** (k + 1) for k in range(bm.order))
        fit = fit_bridge(spec.fit_family, *m, stats=stats) if need_fit else None
        rows.append(BridgeRow(int(y2), float(u[y2]), m[0], fit, m))
    return bm, rows, stats


def _uncapped_sr2(bm, duration) -> float:
    return float(bm.raw[0].sum()) / duration


def _cap_level(bm, spec, opts) -> float:
    if spec.cap is not None:
        return spec.cap
    if spec.cap_factor is None or math.isinf(spec.cap_factor):
        return math.inf
    if opts.literal_rv_max:
        if bm.order < 2:
            raise PricingError("literal RV_max needs second moments")
        return spec.cap_factor * float(bm.transition @ bm.raw[1]) / spec.duration ** 2
    return spec.cap_factor * _uncapped_sr2(bm, spec.duration)


def _equilibrium(rows, f, vol: bool) -> float:
    """Exact swap rate: root of E[min(RV, f SR^2)] = SR^2 (or its volatility analogue)."""
    pay = "sqrtRV" if vol else "RV"

    def excess(sr):
        cap = f * sr * sr
        e = sum(r.weight * capped_expectation(r.fit, pay, cap) for r in rows)
        return e - (sr if vol else sr * sr)

    hi = sum(r.weight * capped_expectation(r.fit, pay, math.inf) for r in rows)
    hi = hi if vol else math.sqrt(hi)
    if hi <= 0:
        return 0.0
    if excess(hi) >= 0:
        return hi
    return brentq(excess, 1e-12 * hi, hi, xtol=1e-14 * hi, rtol=1e-14)


def _price_rv_swap(model, spec, opts, vol: bool, kind="variance", corridor=None) -> PriceReport:
    need_fit = vol or spec.capped or opts.root_finder
    if vol and spec.fit_family == "pearson3":
        raise fitting.UnsupportedPayoff("volatility swaps need a chi-square or log-normal fit")
    bm, rows, stats = _rv_bridges(model, spec, opts, kind, corridor, need_fit)
    sr2 = _uncapped_sr2(bm, spec.duration)
    cap = _cap_level(bm, spec, opts) if need_fit else math.inf
    pay = "sqrtRV" if vol else "RV"
    if need_fit:
        for r in rows:
            r.payoff = capped_expectation(r.fit, pay, cap)
    report = PriceReport(spec, 0.0, "sum" if vol else "sqrt_sum", rows, stats,
                         {"uncapped_variance_rate": math.sqrt(max(sr2, 0.0)), "rv_max": cap})
    if opts.root_finder and spec.cap_factor is not None and not math.isinf(spec.cap_factor):
        report.aggregation = "root_vol" if vol else "root_var"
    if not rows:
        if sr2 != 0:
            raise PricingError("all bridges degenerate")
        return report
    report.headline = report.resum()
    return report


def price_variance_swap(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    return _price_rv_swap(model, spec, opts, vol=False)


def price_volatility_swap(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    return _price_rv_swap(model, spec, opts, vol=True)


def price_corridor_variance_swap(model, spec: ContractSpec,
                                 opts: PricingOptions = PricingOptions()) -> PriceReport:
    if spec.corridor is None:
        raise PricingError("corridor variance swap needs a corridor")
    kind = "variance" if spec.corridor.is_full else "corridor_variance"
    return _price_rv_swap(model, spec, opts, vol=False, kind=kind,
                          corridor=None if spec.corridor.is_full else spec.corridor)


def price_gamma_swap(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    bm = _moments(model, "gamma", None, spec, opts, 1)
    d = spec.duration
    u = bm.transition
    keep = u > opts.transition_floor
    rows = [BridgeRow(int(y), float(u[y]), float(bm.raw[0, y] / u[y] / d), None, (bm.raw[0, y] / u[y] / d,))
            for y in np.flatnonzero(keep)]
    report = PriceReport(spec, 0.0, "sqrt_sum", rows, {"skipped_mass": float(u[~keep].sum())},
                         {"gamma_weight": opts.gamma_weight, "spot_weight": opts.spot_weight})
    report.headline = report.resum()
    return report


def price_conditional_variance_swap(model, spec: ContractSpec,
                                    opts: PricingOptions = PricingOptions()) -> PriceReport:
    """Variance accrued in the corridor divided by the time spent there.

    Each bridge gets a bivariate log-normal fit of (corridor variance, occupation
    time); bridges whose expected occupation is below the floor are excluded.
    """
    if spec.corridor is None:
        raise PricingError("conditional variance swap needs a corridor")
    d = spec.duration
    inside = spec.corridor.indicator(model.prices)
    stats = {"excluded_mass": 0.0, "skipped_mass": 0.0, "deterministic_denominator": 0,
             "moment_form": 0}
    rows = []
    occ_floor = opts.occupation_floor * d
    if inside.all():
        # occupation time is exactly t - T on every path
        bm = _moments(model, "variance", None, spec, opts, 1)
        u = bm.transition
        keep = u > opts.transition_floor
        stats["skipped_mass"] = float(u[~keep].sum())
        stats["deterministic_denominator"] = int(keep.sum())
        for y2 in np.flatnonzero(keep):
            m10 = bm.raw[0, y2] / u[y2]
            rows.append(BridgeRow(int(y2), float(u[y2]), float(min(m10 / d, spec.cap or math.inf)),
                                  None, (m10, d)))
    else:
        phi = _functional(model, "corridor_variance", spec.corridor, opts)
        psi = _functional(model, "occupation", spec.corridor, opts)
        key = ("bivariate", spec.corridor, opts.indicator, spec.T, spec.t, opts.method,
               opts.eps_base, opts.transition_floor)
        bb = _cached(model, key, lambda: bivariate_moments(
            model, phi, psi, spec.T, spec.t, eps_base=opts.eps_base, method=opts.method,
            floor=opts.transition_floor))
        u = bb.transition
        keep = u > opts.transition_floor
        stats["skipped_mass"] = float(u[~keep].sum())
        nm = bb.normalized
        for y2 in np.flatnonzero(keep):
            m = tuple(float(nm[k][y2]) for k in ("m10", "m20", "m01", "m02", "m11"))
            m10, m20, m01, m02, m11 = m
            if m01 < occ_floor:
                stats["excluded_mass"] += float(u[y2])
                continue
            payoff, fit = _bridge_ratio(m, spec.cap, stats)
            rows.append(BridgeRow(int(y2), float(u[y2]), payoff, fit, m))
    report = PriceReport(spec, 0.0, "sqrt_ratio", rows, stats, {})
    if not rows:
        raise PricingError("all bridges below the occupation floor")
    report.headline = report.resum()
    return report


def _bridge_ratio(m, cap, stats):
    m10, m20, m01, m02, m11 = m
    if m10 <= 0:
        return 0.0, None
    try:
        bfit = fit_bivariate_lognormal(*m)
    except ZeroVariance:
        if m02 <= m01 * m01 * (1 + fitting.ZERO_VARIANCE_RTOL):
            stats["deterministic_denominator"] += 1
            value = m10 / m01
            return (min(value, cap) if cap is not None else value), None
        bfit = None
    except FitError:
        bfit = None
    if bfit is None:
        stats["moment_form"] += 1
        value = ratio_expectation_from_moments(*m)
        return (min(value, cap) if cap is not None else value), None
    if cap is not None:
        return capped_ratio_expectation(bfit, cap), bfit
    return ratio_expectation(bfit), bfit


def rv_call_from_moments(m1: float, m2: float, strike: float, discount: float = 1.0):
    """Discounted ``E[(RV - K)+]`` under the log-normal matched to (m1, m2); returns (price, fit)."""
    k = strike
    try:
        fit = fit_lognormal(m1, m2)
    except ZeroVariance:
        return discount * max(m1 - k, 0.0), DeterministicFit(m1)
    if k <= 0:
        return discount * (m1 - k), fit
    d1 = (fit.mu + fit.sigma ** 2 - math.log(k)) / fit.sigma
    d2 = d1 - fit.sigma
    return discount * (m1 * special.ndtr(d1) - k * special.ndtr(d2)), fit


def _rv_call(rows, strike, discount, duration):
    w = np.array([r.weight for r in rows])
    mass = w.sum()
    m1 = float(w @ np.array([r.moments[0] for r in rows])) / mass
    m2 = float(w @ np.array([r.moments[1] for r in rows])) / mass
    return rv_call_from_moments(m1, m2, strike, discount)


def price_rv_option(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    """Call on realized variance, log-normal fit of the unconditional moments."""
    if spec.strike is None or spec.strike < 0:
        raise PricingError("RV option needs a non-negative strike in variance units")
    bm = _moments(model, "variance", None, spec, opts, 2)
    d = spec.duration
    u = bm.transition
    keep = u > 0
    rows = [BridgeRow(int(y), float(u[y]), 0.0, None,
                      (bm.raw[0, y] / u[y] / d, bm.raw[1, y] / u[y] / d ** 2))
            for y in np.flatnonzero(keep)]
    disc = model.discount(spec.T, spec.t)
    report = PriceReport(spec, 0.0, "rv_call", rows, {}, {"discount": disc})
    value, fit = _rv_call(rows, spec.strike, disc, d)
    report.headline = value
    report.extras["fit"] = _fit_params(fit)
    return report


def price_variance_knockout(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    """Equity call paying only if realized variance stays below the squared barrier."""
    if spec.strike is None or spec.barrier is None:
        raise PricingError("variance knockout needs an equity strike and a volatility barrier")
    disc = model.discount(spec.T, spec.t)
    h2 = spec.barrier ** 2
    intrinsic = np.maximum(disc * model.prices - spec.strike, 0.0)
    stats = {}
    if math.isinf(h2):
        u = model.propagator_row(spec.T, spec.t)
        rows = [BridgeRow(int(y), float(u[y]), float(intrinsic[y]), None, ())
                for y in range(model.n_states) if u[y] != 0 or intrinsic[y] != 0]
    else:
        bm, rows, stats = _rv_bridges(model, spec, opts)
        for r in rows:
            prob = 0.0 if h2 <= 0 else float(np.clip(r.fit.cdf(h2), 0.0, 1.0))
            r.payoff = prob * float(intrinsic[r.y2])
    report = PriceReport(spec, 0.0, "sum", rows, stats, {"discount": disc})
    report.headline = report.resum()
    return report


PRICERS = {
    "varianceSwap": price_variance_swap,
    "volatilitySwap": price_volatility_swap,
    "corridorVarianceSwap": price_corridor_variance_swap,
    "conditionalVarianceSwap": price_conditional_variance_swap,
    "gammaSwap": price_gamma_swap,
    "rvOption": price_rv_option,
    "varianceKnockout": price_variance_knockout,
}


def price(model, spec: ContractSpec, opts: PricingOptions = PricingOptions()) -> PriceReport:
    return PRICERS[spec.kind](model, spec, opts)
