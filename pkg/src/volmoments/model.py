"""Built model: state prices, piecewise-constant generators and the rate curve."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lattice import (
    N_OUTLOOK, N_VOL, GeneratorMatrix, GridSpec, LatticeState, ModelConfig, Outlook,
    RateCurve, StockGrid, VolRegime, build_jump_operators, build_stock_grid,
    calibrate_and_assemble, validate_generator,
)
from .propagator import DEFAULT_TOL, Propagator, PropagatorCache, TimeGrid, compose


@dataclass
class MarkovModel:
    """Everything the moment engine, pricers and simulator need.

    ``prices[y]`` is S at flattened state y; ``time_grid`` carries one generator
    per interval of piecewise-constant rates.
    """

    prices: np.ndarray
    time_grid: TimeGrid
    rates: RateCurve
    initial_state: int
    grid: Optional[StockGrid] = None
    config: Optional[ModelConfig] = None
    absorbing: Optional[np.ndarray] = None
    tol: float = DEFAULT_TOL
    cache: PropagatorCache = field(default=None, repr=False)

    def __post_init__(self):
        if self.cache is None:
            self.cache = PropagatorCache(self.tol)

    @property
    def n_states(self) -> int:
        return len(self.prices)

    @property
    def S0(self) -> float:
        return float(self.prices[self.initial_state])

    @property
    def horizon(self) -> float:
        return self.time_grid.boundaries[-1]

    def intervals(self, t1: float, t2: float):
        return self.time_grid.between(t1, t2)

    def propagator(self, t1: float, t2: float) -> Propagator:
        return compose(self.time_grid, t1, t2, self.cache)

    def propagator_row(self, t1: float, t2: float, y1: Optional[int] = None) -> np.ndarray:
        y1 = self.initial_state if y1 is None else y1
        row = np.zeros(self.n_states)
        row[y1] = 1.0
        for iv in self.intervals(t1, t2):
            row = row @ self.cache.interval(iv)
        return row

    def discount(self, t1: float, t2: float) -> float:
        return self.rates.discount(t1, t2)

    def state_label(self, y: int) -> tuple:
        """(x, a, b) for lattice models, (y, '', '') otherwise."""
        if self.grid is None:
            return (y, "", "")
        s = LatticeState.from_flat(y, self.grid.nx)
        return (s.x, s.a.name.lower(), s.b.name.lower())

    def validate(self, tolerances=(0.0, 1e-12, 1e-6)) -> list:
        return [validate_generator(iv.generator, self.prices, iv.generator.rate,
                                   absorbing=self.absorbing, tolerances=tolerances)
                for iv in self.time_grid.intervals]


def interval_boundaries(horizon: float, step: float, rates: RateCurve) -> list:
    """Uniform steps up to ``horizon`` merged with the rate breakpoints inside it."""
    if horizon > rates.horizon + 1e-12:
        raise ValueError(f"horizon {horizon} beyond rate-curve span {rates.horizon}")
    n = int(round(horizon / step))
    pts = {round(i * step, 12) for i in range(n + 1)}
    if abs(n * step - horizon) > 1e-9:
        pts.add(round(horizon, 12))
    pts |= {round(b, 12) for b in rates.breakpoints if 0 < b < horizon}
    return sorted(pts)


def build_lattice_model(cfg: ModelConfig = ModelConfig(), nx: int = 70, spot: float = 100.0,
                        grid_spec: GridSpec = GridSpec(), beta=None,
                        rates: RateCurve = RateCurve.flat(0.03), horizon: float = 3.0,
                        step: float = 0.25, initial_outlook: Outlook = Outlook.STABLE,
                        initial_vol: VolRegime = VolRegime.MEDIUM, tol: float = DEFAULT_TOL) -> MarkovModel:
    grid = build_stock_grid(nx, spot, grid_spec, beta)
    jumps = build_jump_operators(grid, cfg)
    bounds = interval_boundaries(horizon, step, rates)
    by_rate = {}
    generators = []
    for t0, t1 in zip(bounds, bounds[1:]):
        r = rates.rate_on(t0, t1)
        if r not in by_rate:
            by_rate[r] = calibrate_and_assemble(grid, cfg, rates, (t0, t1), jumps)
        g = by_rate[r]
        # share the entries array so kernels are computed once per distinct rate
        generators.append(GeneratorMatrix(g.entries, (t0, t1), r, g.absorbing, g.variance_shortfall))
    prices = np.tile(grid.prices, N_OUTLOOK * N_VOL)
    y0 = LatticeState(grid.spot_index, initial_outlook, initial_vol).flat(nx)
    return MarkovModel(prices, TimeGrid.from_generators(generators), rates, y0, grid=grid,
                       config=cfg, absorbing=generators[0].absorbing, tol=tol)


def build_explicit_model(generator, prices, initial_state: int = 0,
                         rates: RateCurve = RateCurve.flat(0.0), horizon: float = 1.0,
                         step: float = 0.25, tol: float = DEFAULT_TOL) -> MarkovModel:
    """Model from a user-supplied constant generator (small test chains)."""
    entries = np.asarray(generator, dtype=float)
    prices = np.asarray(prices, dtype=float)
    if entries.shape != (len(prices), len(prices)):
        raise ValueError("generator shape does not match the number of prices")
    bounds = interval_boundaries(horizon, step, rates)
    gens = [GeneratorMatrix(entries, (t0, t1), rates.rate_on(t0, t1))
            for t0, t1 in zip(bounds, bounds[1:])]
    return MarkovModel(prices, TimeGrid.from_generators(gens), rates, int(initial_state), tol=tol)
