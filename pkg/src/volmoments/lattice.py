"""Finite-state lattice model: stock grid, jump operators and the Markov generator.

States are triples ``(x, a, b)`` with ``x`` a price node, ``a`` the outlook
regime and ``b`` the volatility regime, flattened as ``x + Nx * (a + 2 * b)``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq


class LatticeError(ValueError):
    """Raised for invalid grids, configurations or infeasible calibrations."""


class Outlook(enum.IntEnum):
    STABLE = 0
    NEGATIVE = 1


class VolRegime(enum.IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2


N_OUTLOOK = len(Outlook)
N_VOL = len(VolRegime)


@dataclass(frozen=True)
class LatticeState:
    x: int
    a: Outlook
    b: VolRegime

    def flat(self, nx: int) -> int:
        if not 0 <= self.x < nx:
            raise LatticeError(f"price index {self.x} outside 0..{nx - 1}")
        return self.x + nx * (int(self.a) + N_OUTLOOK * int(self.b))

    @classmethod
    def from_flat(cls, index: int, nx: int) -> "LatticeState":
        if not 0 <= index < N_OUTLOOK * N_VOL * nx:
            raise LatticeError(f"flat index {index} out of range")
        x = index % nx
        rest = index // nx
        return cls(x, Outlook(rest % N_OUTLOOK), VolRegime(rest // N_OUTLOOK))


@dataclass(frozen=True)
class BetaCurve:
    """Piecewise-linear local-vol exponent beta(S), flat beyond the end points."""

    prices: tuple = (1.0,)
    values: tuple = (1.0,)

    def __post_init__(self):
        if len(self.prices) != len(self.values) or not self.prices:
            raise LatticeError("beta curve needs matching, non-empty price/value lists")
        if any(b <= a for a, b in zip(self.prices, self.prices[1:])):
            raise LatticeError("beta curve prices must be strictly increasing")
        if any(not 0.0 <= v <= 2.0 for v in self.values):
            raise LatticeError("beta values must lie in [0, 2]")

    def __call__(self, s):
        return np.interp(s, self.prices, self.values)


@dataclass(frozen=True)
class GridSpec:
    lo: float = 10.0
    hi: float = 1000.0


@dataclass(frozen=True)
class StockGrid:
    prices: np.ndarray
    spot_index: int
    spot_requested: float
    beta: BetaCurve = field(default_factory=BetaCurve)

    @property
    def nx(self) -> int:
        return len(self.prices)

    @property
    def S0(self) -> float:
        return float(self.prices[self.spot_index])

    def beta_values(self) -> np.ndarray:
        return self.beta(self.prices)

    def log_step(self, x: int) -> float:
        """Half of the smaller log-distance to a neighbouring node."""
        lp = np.log(self.prices)
        gaps = []
        if x > 0:
            gaps.append(lp[x] - lp[x - 1])
        if x < self.nx - 1:
            gaps.append(lp[x + 1] - lp[x])
        return 0.5 * min(gaps)


def build_stock_grid(nx: int, spot: float, grid_spec: GridSpec = GridSpec(),
                     beta: Optional[BetaCurve] = None) -> StockGrid:
    """Log-uniform price grid on ``[grid_spec.lo, grid_spec.hi]``.

    The spot is mapped to the nearest node; the requested value is kept on the
    grid for reference.
    """
    if nx < 3:
        raise LatticeError(f"need at least 3 price nodes for tridiagonal drift matching, got {nx}")
    if not (0 < grid_spec.lo < grid_spec.hi):
        raise LatticeError(f"non-monotone grid span [{grid_spec.lo}, {grid_spec.hi}]")
    if not grid_spec.lo <= spot <= grid_spec.hi:
        raise LatticeError(f"spot {spot} outside grid span [{grid_spec.lo}, {grid_spec.hi}]")
    prices = np.exp(np.linspace(math.log(grid_spec.lo), math.log(grid_spec.hi), nx))
    prices[0], prices[-1] = grid_spec.lo, grid_spec.hi
    spot_index = int(np.argmin(np.abs(prices - spot)))
    return StockGrid(prices, spot_index, float(spot), beta or BetaCurve())


@dataclass(frozen=True)
class RateCurve:
    """Piecewise-constant short rate; ``rates[i]`` applies on ``[breakpoints[i], breakpoints[i+1])``."""

    breakpoints: tuple
    rates: tuple

    def __post_init__(self):
        if len(self.breakpoints) != len(self.rates) + 1 or not self.rates:
            raise LatticeError("rate curve needs len(breakpoints) == len(rates) + 1")
        if self.breakpoints[0] != 0.0:
            raise LatticeError("rate curve must start at t = 0")
        if any(b <= a for a, b in zip(self.breakpoints, self.breakpoints[1:])):
            raise LatticeError("rate curve breakpoints must be strictly increasing")

    @classmethod
    def flat(cls, r: float, horizon: float = 50.0) -> "RateCurve":
        return cls((0.0, float(horizon)), (float(r),))

    @property
    def horizon(self) -> float:
        return self.breakpoints[-1]

    def rate_on(self, t0: float, t1: float) -> float:
        """Rate on ``[t0, t1)``; the interval must not straddle a breakpoint."""
        if t0 < 0 or t1 > self.horizon + 1e-12 or t1 <= t0:
            raise LatticeError(f"interval [{t0}, {t1}) outside rate-curve span [0, {self.horizon}]")
        i = int(np.searchsorted(self.breakpoints, t0 + 1e-12, side="right")) - 1
        if t1 > self.breakpoints[i + 1] + 1e-12:
            raise LatticeError(f"interval [{t0}, {t1}) straddles rate breakpoint {self.breakpoints[i + 1]}")
        return self.rates[i]

    def integral(self, t0: float, t1: float) -> float:
        bp = np.asarray(self.breakpoints)
        total = 0.0
        for i, r in enumerate(self.rates):
            lo, hi = max(t0, bp[i]), min(t1, bp[i + 1])
            if hi > lo:
                total += r * (hi - lo)
        return total

    def discount(self, t0: float, t1: Optional[float] = None) -> float:
        if t1 is None:
            t0, t1 = 0.0, t0
        return math.exp(-self.integral(t0, t1))


# regime switch keys, in the (from, to) order used by the config schema
REGIME_SWITCH_KEYS = ("low_medium", "medium_low", "medium_high", "high_medium")


@dataclass(frozen=True)
class ModelConfig:
    neg_jump_size: float = 0.12
    stable_jump_size: float = 0.02
    jump_intensity: float = 1.0
    vg_variance_rate: float = 0.04
    regime_vols: tuple = (0.12, 0.20, 0.32)
    regime_switch_rates: tuple = (2.0, 1.0, 0.5, 2.0)
    # outlook change probabilities applied at jump epochs (stable->negative, negative->stable)
    jump_outlook_switch: tuple = (0.2, 0.3)
    # independent outlook switching intensities (stable->negative, negative->stable)
    outlook_switch_rates: tuple = (0.0, 0.0)
    small_jump_truncation: Optional[float] = None

    def __post_init__(self):
        scalars = dict(neg_jump_size=self.neg_jump_size, stable_jump_size=self.stable_jump_size,
                       jump_intensity=self.jump_intensity, vg_variance_rate=self.vg_variance_rate)
        for name, v in scalars.items():
            if v < 0:
                raise LatticeError(f"{name} must be non-negative, got {v}")
        if len(self.regime_vols) != N_VOL or any(v <= 0 for v in self.regime_vols):
            raise LatticeError("regime_vols needs three positive entries")
        if any(b < a for a, b in zip(self.regime_vols, self.regime_vols[1:])):
            raise LatticeError("regime_vols must be non-decreasing from low to high")
        if len(self.regime_switch_rates) != 4 or min(self.regime_switch_rates) < 0:
            raise LatticeError("regime_switch_rates needs four non-negative intensities")
        if any(not 0 <= p <= 1 for p in self.jump_outlook_switch):
            raise LatticeError("jump_outlook_switch entries are probabilities")
        if min(self.outlook_switch_rates) < 0:
            raise LatticeError("outlook_switch_rates must be non-negative")
        if self.small_jump_truncation is not None and self.small_jump_truncation < 0:
            raise LatticeError("small_jump_truncation must be non-negative")


@dataclass(frozen=True)
class JumpOperators:
    """Jump rate matrices with zero row sums.

    ``outlook`` acts on the joint (x, a) index ``x + Nx * a``; ``vg[b]`` acts on x.
    ``small_jump_variance[b, x]`` is the folded log-variance rate of VG jumps
    below the truncation, handed to the diffusion calibration.
    """

    outlook: np.ndarray
    vg: np.ndarray
    small_jump_variance: np.ndarray


def _with_diagonal(m: np.ndarray) -> np.ndarray:
    m = np.array(m, dtype=float)
    np.fill_diagonal(m, 0.0)
    np.fill_diagonal(m, -np.array([math.fsum(row) for row in m]))
    return m


def local_vols(grid: StockGrid, cfg: ModelConfig) -> np.ndarray:
    """Log-volatility per (b, x): regime vol times (S / S0) ** (beta(S) - 1)."""
    scale = (grid.prices / grid.S0) ** (grid.beta_values() - 1.0)
    return np.asarray(cfg.regime_vols)[:, None] * scale[None, :]


def _point_mass_weights(logp: np.ndarray, x: int, z: float) -> np.ndarray:
    """Split a log-move ``z`` from node x between its two bracketing nodes (log-linear)."""
    w = np.zeros(len(logp))
    target = logp[x] + z
    if target <= logp[0]:
        w[0] = 1.0
    elif target >= logp[-1]:
        w[-1] = 1.0
    else:
        k = int(np.searchsorted(logp, target, side="right")) - 1
        frac = (target - logp[k]) / (logp[k + 1] - logp[k])
        w[k] += 1.0 - frac
        w[k + 1] += frac
    return w


def _exponential_down_weights(logp: np.ndarray, x: int, mean_size: float) -> np.ndarray:
    """Downward exponential amplitude law bucketed over nodes below x.

    Bucket masses come from integrating an exponential density over log-price
    buckets (self bucket excluded, renormalised to one); its scale is tuned so
    the discrete mean log-move equals ``-mean_size``.
    """
    w = np.zeros(len(logp))
    if x == 0 or mean_size == 0:
        w[x] = 1.0
        return w
    d = logp[x] - logp[:x]          # positive distances, farthest first
    mids = 0.5 * (d[:-1] + d[1:])
    lo = np.append(mids, 0.5 * d[-1])
    hi = np.insert(mids, 0, np.inf)

    def masses(scale):
        p = np.exp(-lo / scale) - np.exp(-hi / scale)
        return p / p.sum()

    def excess(scale):
        return float(masses(scale) @ d) - mean_size

    s_lo, s_hi = 1e-4, 50.0
    if excess(s_lo) >= 0:
        scale = s_lo
    elif excess(s_hi) <= 0:
        scale = s_hi
    else:
        scale = brentq(excess, s_lo, s_hi, xtol=1e-14)
    w[:x] = masses(scale)
    return w


def _vg_row(logp: np.ndarray, x: int, sigma: float, nu: float, trunc: float):
    """Second-moment-preserving VG bucket rates from node x and the folded variance."""
    nx = len(logp)
    rates = np.zeros(nx)
    eta = sigma * math.sqrt(nu / 2.0)

    def z2_mass(a, b):
        # (1/nu) * int_a^b z exp(-z/eta) dz
        ea = (a + eta) * math.exp(-a / eta)
        eb = 0.0 if math.isinf(b) else (b + eta) * math.exp(-b / eta)
        return eta * (ea - eb) / nu

    folded = 0.0
    for side in (+1, -1):
        nodes = range(x + 1, nx) if side > 0 else range(x - 1, -1, -1)
        dist = np.array([abs(logp[k] - logp[x]) for k in nodes])
        if len(dist) == 0:
            folded += z2_mass(0.0, math.inf)
            continue
        cut = max(trunc, 0.5 * dist[0])
        edges = np.concatenate(([0.5 * dist[0]], 0.5 * (dist[:-1] + dist[1:]), [math.inf]))
        folded += z2_mass(0.0, cut)
        for j, k in enumerate(nodes):
            a, b = max(cut, edges[j]), edges[j + 1]
            if b <= a:
                continue
            m = z2_mass(a, b)
            if m < 0:
                raise LatticeError(f"negative VG bucket mass at x={x} -> {k}")
            rates[k] = m / dist[j] ** 2
    return rates, folded


def build_jump_operators(grid: StockGrid, cfg: ModelConfig) -> JumpOperators:
    """Outlook jumps (x, a) -> (x', a') and variance-gamma jumps x -> x' per vol regime."""
    nx = grid.nx
    logp = np.log(grid.prices)
    span = logp[-1] - logp[0]
    trunc = cfg.small_jump_truncation or 0.0
    if trunc >= span:
        raise LatticeError(f"small-jump truncation {trunc} exceeds grid log-span {span:.4f}")

    p_sn, p_ns = cfg.jump_outlook_switch
    q = np.array([[1 - p_sn, p_sn], [p_ns, 1 - p_ns]])
    outlook = np.zeros((N_OUTLOOK * nx, N_OUTLOOK * nx))
    if cfg.jump_intensity > 0:
        for x in range(1, nx - 1):
            w_stable = 0.5 * (_point_mass_weights(logp, x, cfg.stable_jump_size)
                              + _point_mass_weights(logp, x, -cfg.stable_jump_size))
            w_neg = _exponential_down_weights(logp, x, cfg.neg_jump_size)
            for a, w in ((Outlook.STABLE, w_stable), (Outlook.NEGATIVE, w_neg)):
                row = x + nx * a
                for a2 in Outlook:
                    outlook[row, nx * a2:nx * (a2 + 1)] += cfg.jump_intensity * q[a, a2] * w
    outlook = _with_diagonal(outlook)

    vols = local_vols(grid, cfg)
    vg = np.zeros((N_VOL, nx, nx))
    small = np.zeros((N_VOL, nx))
    nu = cfg.vg_variance_rate
    for b in VolRegime:
        for x in range(nx):
            sigma = vols[b, x]
            if nu == 0:
                small[b, x] = sigma ** 2
                continue
            if x in (0, nx - 1):
                continue
            vg[b, x], small[b, x] = _vg_row(logp, x, sigma, nu, trunc)
        vg[b] = _with_diagonal(vg[b])
    return JumpOperators(outlook, vg, small)


def build_regime_switch_operator(cfg: ModelConfig) -> np.ndarray:
    """3x3 rate matrix over {low, medium, high}; only adjacent regimes communicate."""
    lm, ml, mh, hm = cfg.regime_switch_rates
    if min(lm, ml, mh, hm) < 0:
        raise LatticeError("negative regime-switch rate")
    v = np.array([[0.0, lm, 0.0], [ml, 0.0, mh], [0.0, hm, 0.0]])
    return _with_diagonal(v)


@dataclass(frozen=True)
class GeneratorMatrix:
    entries: np.ndarray
    interval: tuple
    rate: float = 0.0
    # nodes whose price does not move (default state and upper boundary)
    absorbing: Optional[np.ndarray] = None
    variance_shortfall: Optional[np.ndarray] = None

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]


def calibrate_and_assemble(grid: StockGrid, cfg: ModelConfig, rates: RateCurve,
                           interval: tuple, jumps: Optional[JumpOperators] = None) -> GeneratorMatrix:
    """Assemble the full generator on ``interval`` with drift matched to the short rate.

    For every state off the price boundaries the up/down nearest-neighbour rates
    solve ``l_up dS_up + l_dn dS_dn = r S - jump drift`` exactly and
    ``l_up dS_up^2 + l_dn dS_dn^2 = folded small-jump variance * S^2`` when that
    is compatible with non-negative rates; otherwise variance gives way.
    """
    t0, t1 = interval
    r = rates.rate_on(t0, t1)
    jumps = jumps or build_jump_operators(grid, cfg)
    nx = grid.nx
    n = N_OUTLOOK * N_VOL * nx
    S = grid.prices

    L = np.zeros((n, n))
    for b in VolRegime:
        blk = slice(b * N_OUTLOOK * nx, (b + 1) * N_OUTLOOK * nx)
        L[blk, blk] += jumps.outlook
        for a in Outlook:
            sub = slice(nx * (a + N_OUTLOOK * b), nx * (a + 1 + N_OUTLOOK * b))
            L[sub, sub] += jumps.vg[b]
    L += np.kron(build_regime_switch_operator(cfg), np.eye(N_OUTLOOK * nx))
    sn, ns = cfg.outlook_switch_rates
    out_rates = np.array([[-sn, sn], [ns, -ns]])
    L += np.kron(np.eye(N_VOL), np.kron(out_rates, np.eye(nx)))
    np.fill_diagonal(L, 0.0)

    s_flat = np.tile(S, N_OUTLOOK * N_VOL)
    x_flat = np.tile(np.arange(nx), N_OUTLOOK * N_VOL)
    b_flat = np.repeat(np.arange(N_VOL), N_OUTLOOK * nx)
    absorbing = (x_flat == 0) | (x_flat == nx - 1)
    shortfall = np.zeros(n)

    jump_drift = L @ s_flat - L.sum(axis=1) * s_flat
    for y in np.flatnonzero(~absorbing):
        x = x_flat[y]
        s = S[x]
        d_up, d_dn = S[x + 1] - s, S[x - 1] - s
        mu = r * s - jump_drift[y]
        var = jumps.small_jump_variance[b_flat[y], x] * s * s
        l_up = (var - mu * d_dn) / (d_up * (d_up - d_dn))
        l_dn = (var - mu * d_up) / (d_dn * (d_dn - d_up))
        if l_dn < 0:
            l_dn, l_up = 0.0, mu / d_up
        elif l_up < 0:
            l_up, l_dn = 0.0, mu / d_dn
        shortfall[y] = var - (l_up * d_up ** 2 + l_dn * d_dn ** 2)
        L[y, y + 1] += l_up
        L[y, y - 1] += l_dn

    L = _with_diagonal(L)
    return GeneratorMatrix(L, (t0, t1), r, absorbing, shortfall)


@dataclass
class ValidationReport:
    max_negative_offdiag: float
    worst_offdiag: Optional[tuple]
    max_abs_row_sum: float
    worst_row_sum: Optional[int]
    max_drift_residual: float
    worst_drift_row: Optional[int]
    tolerances: tuple
    passed_positivity: bool
    passed_conservation: bool
    passed_drift: bool

    @property
    def passed(self) -> bool:
        return self.passed_positivity and self.passed_conservation and self.passed_drift

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "positivity": {"passed": self.passed_positivity,
                           "max_negative_offdiag": self.max_negative_offdiag,
                           "location": self.worst_offdiag},
            "conservation": {"passed": self.passed_conservation,
                             "max_abs_row_sum": self.max_abs_row_sum,
                             "row": self.worst_row_sum},
            "drift": {"passed": self.passed_drift,
                      "max_relative_residual": self.max_drift_residual,
                      "row": self.worst_drift_row},
            "tolerances": {"positivity": self.tolerances[0], "row_sum": self.tolerances[1],
                           "drift_relative": self.tolerances[2]},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=_json_default)

    def to_text(self) -> str:
        fmt = "{:<13} {:<5} {}"
        lines = [
            fmt.format("positivity", _flag(self.passed_positivity),
                       f"max negative off-diagonal {self.max_negative_offdiag:.3e} at {self.worst_offdiag}"),
            fmt.format("conservation", _flag(self.passed_conservation),
                       f"max |row sum| {self.max_abs_row_sum:.3e} at row {self.worst_row_sum}"),
            fmt.format("drift", _flag(self.passed_drift),
                       f"max drift residual / S {self.max_drift_residual:.3e} at row {self.worst_drift_row}"),
        ]
        return "\n".join(lines)


def _flag(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def validate_generator(L, prices: Sequence[float], rate: float,
                       absorbing: Optional[np.ndarray] = None,
                       tolerances: tuple = (0.0, 1e-12, 1e-6)) -> ValidationReport:
    """Check positivity, conservation and the risk-neutral drift condition.

    ``prices`` holds S for every flattened state; the drift residual is reported
    relative to S and rows flagged ``absorbing`` are exempt from it.
    """
    entries = L.entries if isinstance(L, GeneratorMatrix) else np.asarray(L, dtype=float)
    if absorbing is None and isinstance(L, GeneratorMatrix):
        absorbing = L.absorbing
    n = entries.shape[0]
    s = np.asarray(prices, dtype=float)
    off = entries.copy()
    np.fill_diagonal(off, 0.0)
    neg = -off.min() if n > 1 else 0.0
    neg = max(neg, 0.0)
    worst_off = tuple(int(i) for i in np.unravel_index(np.argmin(off), off.shape)) if neg > 0 else None
    row_sums = np.array([abs(math.fsum(row)) for row in entries])
    drift = np.abs(entries @ s - entries.sum(axis=1) * s - rate * s) / s
    if absorbing is not None:
        drift = np.where(absorbing, 0.0, drift)
    tol_pos, tol_row, tol_drift = tolerances
    return ValidationReport(
        max_negative_offdiag=float(neg),
        worst_offdiag=worst_off,
        max_abs_row_sum=float(row_sums.max()),
        worst_row_sum=int(np.argmax(row_sums)),
        max_drift_residual=float(drift.max()),
        worst_drift_row=int(np.argmax(drift)),
        tolerances=tuple(tolerances),
        passed_positivity=neg <= tol_pos,
        passed_conservation=row_sums.max() <= tol_row,
        passed_drift=drift.max() <= tol_drift,
    )
