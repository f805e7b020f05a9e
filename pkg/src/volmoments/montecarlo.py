"""Exact event-driven simulation of the chain, vectorised across paths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .moments import build_functional
from .pricers import ContractSpec, PricingError, PricingOptions

BLOCK = 8192


@dataclass(frozen=True)
class McEstimate:
    mean: float
    se: float
    n: int
    seed: int
    excluded: float = 0.0

    def zscore(self, value: float) -> float:
        if self.se == 0:
            return 0.0 if abs(value - self.mean) <= 1e-12 * max(1.0, abs(self.mean)) else math.inf
        return (value - self.mean) / self.se


@dataclass
class SimulatedPath:
    jump_times: np.ndarray
    states: np.ndarray
    integrals: np.ndarray
    discrete_sq: float
    terminal: int


@dataclass
class PathBatch:
    """Per-path accumulators for a batch of simulated paths."""

    integrals: np.ndarray       # (n_functionals, N)
    discrete_sq: np.ndarray     # (N,)
    terminal: np.ndarray        # (N,)
    n_jumps: np.ndarray         # (N,)
    seed: int = 0


@dataclass
class _Kernel:
    rates: np.ndarray           # exit rate per state
    cum: np.ndarray             # flattened y + cumulative jump law of row y
    n: int


_kernels = {}


def _kernel(entries: np.ndarray) -> _Kernel:
    key = id(entries)
    hit = _kernels.get(key)
    if hit is not None and hit[0] is entries:
        return hit[1]
    a = np.asarray(entries, dtype=float)
    n = a.shape[0]
    off = np.clip(a, 0.0, None)
    off[np.diag_indices(n)] = 0.0
    q = off.sum(axis=1)
    cdf = np.cumsum(off, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cdf = np.where(q[:, None] > 0, cdf / q[:, None], 1.0)
    cdf[:, -1] = 1.0
    cum = (np.arange(n)[:, None] + cdf).ravel()
    k = _Kernel(q, cum, n)
    _kernels[key] = (entries, k)
    return k


def _simulate_block(model, ivs, phis, start, n, rng, logs):
    nf = len(phis)
    acc = np.zeros((nf, n))
    dsq = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    state = np.full(n, start, dtype=np.int64) if np.isscalar(start) else np.asarray(start).copy()
    for iv in ivs:
        ker = _kernel(iv.generator.entries)
        tab = np.array([p.on(iv) for p in phis]) if nf else np.zeros((0, ker.n))
        clock = np.full(n, iv.t0)
        active = np.arange(n)
        while active.size:
            y = state[active]
            q = ker.rates[y]
            with np.errstate(divide="ignore"):
                hold = rng.standard_exponential(active.size) / q
            left = iv.t1 - clock[active]
            done = hold >= left
            dt = np.where(done, left, hold)
            acc[:, active] += tab[:, y] * dt
            movers = active[~done]
            if movers.size:
                ym = y[~done]
                u = rng.random(movers.size)
                g = np.searchsorted(ker.cum, ym + u, side="right")
                dest = np.clip(g - ym * ker.n, 0, ker.n - 1)
                dsq[movers] += (logs[dest] - logs[ym]) ** 2
                jumps[movers] += 1
                clock[movers] += hold[~done]
                state[movers] = dest
            active = movers
    return acc, dsq, state, jumps


def _streams(seed: int, n_paths: int, block: int):
    n_blocks = -(-n_paths // block)
    seqs = np.random.SeedSequence(seed).spawn(n_blocks)
    for i, ss in enumerate(seqs):
        size = min(block, n_paths - i * block)
        yield size, np.random.Generator(np.random.Philox(ss))


def simulate(model, T: float, t: float, functionals: Sequence, n_paths: int, seed: int = 0,
             y1: Optional[int] = None, block: int = BLOCK) -> PathBatch:
    """Simulate ``n_paths`` paths over ``[T, t]`` and return their accumulators.

    Block ``i`` always draws from the i-th child of ``SeedSequence(seed)``, so the
    output depends only on the seed, path count and block size.
    """
    ivs = model.intervals(T, t)
    start = model.initial_state if y1 is None else y1
    logs = np.log(model.prices)
    parts = [_simulate_block(model, ivs, functionals, start, size, rng, logs)
             for size, rng in _streams(seed, n_paths, block)]
    return PathBatch(np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts]),
                     np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]), seed)


def simulate_path(model, y1: int, span: tuple, functionals: Sequence, rng) -> SimulatedPath:
    """One trajectory with its jump record (slow path, for inspection and tests)."""
    logs = np.log(model.prices)
    y = int(y1)
    times, states = [], [y]
    acc = np.zeros(len(functionals))
    dsq = 0.0
    for iv in model.intervals(*span):
        ker = _kernel(iv.generator.entries)
        tab = [f.on(iv) for f in functionals]
        clock = iv.t0
        while True:
            q = ker.rates[y]
            hold = rng.standard_exponential() / q if q > 0 else math.inf
            if clock + hold >= iv.t1:
                acc += [p[y] * (iv.t1 - clock) for p in tab]
                break
            acc += [p[y] * hold for p in tab]
            clock += hold
            dest = min(max(int(np.searchsorted(ker.cum, y + rng.random(), side="right")) - y * ker.n, 0),
                       ker.n - 1)
            dsq += (logs[dest] - logs[y]) ** 2
            y = dest
            times.append(clock)
            states.append(y)
    return SimulatedPath(np.array(times), np.array(states), acc, dsq, y)


def _estimate(x: np.ndarray, seed: int, excluded: float = 0.0) -> McEstimate:
    n = x.size
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return McEstimate(float(x.mean()), se, n, seed, excluded)


@dataclass
class MomentEstimates:
    unconditional: list                        # McEstimate per order
    binned_mean: np.ndarray = field(repr=False)  # [order, y2] estimate of E[I^n 1(y_t = y2)]
    binned_se: np.ndarray = field(repr=False)
    terminal_freq: np.ndarray = field(repr=False)


def estimate_moments(model, functional, T: float, t: float, order: int = 2, n_paths: int = 100_000,
                     seed: int = 0, y1: Optional[int] = None) -> MomentEstimates:
    if n_paths < 1000:
        raise ValueError("need at least 1000 paths")
    b = simulate(model, T, t, [functional], n_paths, seed, y1)
    i = b.integrals[0]
    ns = model.n_states
    mean = np.zeros((order, ns))
    se = np.zeros((order, ns))
    unc = []
    for k in range(order):
        x = i ** (k + 1)
        unc.append(_estimate(x, seed))
        s1 = np.bincount(b.terminal, weights=x, minlength=ns) / n_paths
        s2 = np.bincount(b.terminal, weights=x * x, minlength=ns) / n_paths
        mean[k] = s1
        se[k] = np.sqrt(np.maximum(s2 - s1 * s1, 0.0) / (n_paths - 1))
    freq = np.bincount(b.terminal, minlength=ns) / n_paths
    return MomentEstimates(unc, mean, se, freq)


def estimate_bivariate(model, phi, psi, T: float, t: float, n_paths: int = 100_000, seed: int = 0,
                       y1: Optional[int] = None) -> dict:
    """Unconditional estimates of the five moments of (int phi, int psi)."""
    b = simulate(model, T, t, [phi, psi], n_paths, seed, y1)
    i1, i2 = b.integrals
    return {"m10": _estimate(i1, seed), "m01": _estimate(i2, seed), "m20": _estimate(i1 * i1, seed),
            "m02": _estimate(i2 * i2, seed), "m11": _estimate(i1 * i2, seed)}


def _sqrt_estimate(e: McEstimate) -> McEstimate:
    """Delta-method transfer of a variance-rate estimate to volatility units."""
    m = math.sqrt(max(e.mean, 0.0))
    se = e.se / (2 * m) if m > 0 else 0.0
    return McEstimate(m, se, e.n, e.seed, e.excluded)


def estimate_price(model, spec: ContractSpec, n_paths: int = 100_000, seed: int = 0,
                   opts: PricingOptions = PricingOptions(), rv: str = "compensator") -> McEstimate:
    """Pathwise payoff average in the same units as the pricer headline."""
    if rv not in ("compensator", "discrete"):
        raise ValueError(f"rv must be 'compensator' or 'discrete', got {rv!r}")
    d = spec.duration
    kw = dict(indicator=opts.indicator, gamma_weight=opts.gamma_weight, spot_weight=opts.spot_weight)
    fs = [build_functional("variance", model)]
    if spec.kind in ("corridorVarianceSwap", "conditionalVarianceSwap"):
        if spec.corridor is None:
            raise PricingError(f"{spec.kind} needs a corridor")
        fs += [build_functional("corridor_variance", model, spec.corridor, **kw),
               build_functional("occupation", model, spec.corridor, **kw)]
    elif spec.kind == "gammaSwap":
        fs.append(build_functional("gamma", model, **kw))
    b = simulate(model, spec.T, spec.t, fs, n_paths, seed)
    var = (b.integrals[0] if rv == "compensator" else b.discrete_sq) / d
    if spec.kind in ("varianceSwap", "volatilitySwap"):
        cap = math.inf
        if spec.cap is not None:
            cap = spec.cap
        elif spec.cap_factor is not None and not math.isinf(spec.cap_factor):
            cap = spec.cap_factor * float(var.mean())
        if spec.kind == "varianceSwap":
            return _sqrt_estimate(_estimate(np.minimum(var, cap), seed))
        return _estimate(np.sqrt(np.minimum(var, cap)), seed)
    if spec.kind == "corridorVarianceSwap":
        return _sqrt_estimate(_estimate(b.integrals[1] / d, seed))
    if spec.kind == "conditionalVarianceSwap":
        occ = b.integrals[2]
        keep = occ > 0
        ratio = b.integrals[1][keep] / occ[keep]
        if spec.cap is not None:
            ratio = np.minimum(ratio, spec.cap)
        return _sqrt_estimate(_estimate(ratio, seed, excluded=float(1 - keep.mean())))
    if spec.kind == "gammaSwap":
        return _sqrt_estimate(_estimate(b.integrals[1] / d, seed))
    disc = model.discount(spec.T, spec.t)
    if spec.kind == "rvOption":
        return _estimate(disc * np.maximum(var - spec.strike, 0.0), seed)
    if spec.kind == "varianceKnockout":
        alive = var < spec.barrier ** 2
        return _estimate(alive * np.maximum(disc * model.prices[b.terminal] - spec.strike, 0.0), seed)
    raise PricingError(f"unknown contract kind {spec.kind!r}")
