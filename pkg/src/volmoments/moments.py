"""Bridge-conditional moments of path integrals ``I = int phi(y_s) ds``.

Two routes: central finite differences in ``eps`` of kernels of the deformed
generator ``L + eps diag(phi)``, and an exact block-series exponential whose
off-diagonal blocks are the time-ordered Dyson terms.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .propagator import accuracy_doublings, choose_step, expm_squaring

KINDS = ("variance", "corridor_variance", "occupation", "gamma", "constant")
TRANSITION_FLOOR = 1e-12
DEFAULT_EPS = 2e-3


class MomentError(ValueError):
    pass


def _key(arr: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(arr).tobytes(), digest_size=16).digest()


@dataclass(frozen=True)
class Corridor:
    lo: Optional[float] = None
    hi: Optional[float] = None

    def __post_init__(self):
        if self.lo is not None and self.hi is not None and self.lo >= self.hi:
            raise MomentError(f"corridor lower bound {self.lo} must be below upper bound {self.hi}")

    def indicator(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        lo = -np.inf if self.lo is None else self.lo
        hi = np.inf if self.hi is None else self.hi
        return ((s > lo) & (s < hi)).astype(float)

    @property
    def is_full(self) -> bool:
        return self.lo is None and self.hi is None


@dataclass(frozen=True)
class PathFunctional:
    """phi per state for every generator of the model, keyed by the generator entries."""

    kind: str
    tables: dict = field(repr=False)
    corridor: Optional[Corridor] = None
    indicator: str = "source"

    def on(self, iv) -> np.ndarray:
        return self.tables[id(iv.generator.entries)]

    def max_abs(self, ivs) -> float:
        return max((float(np.abs(self.on(iv)).max()) for iv in ivs), default=0.0)


def instantaneous_variance(L: np.ndarray, prices: np.ndarray, weight=None) -> np.ndarray:
    lp = np.log(prices)
    d2 = (lp[None, :] - lp[:, None]) ** 2
    if weight is not None:
        d2 = d2 * weight
    return (L * d2).sum(axis=1)


def build_functional(kind: str, model, corridor: Optional[Corridor] = None, indicator: str = "source",
                     gamma_weight: str = "ratio", spot_weight: bool = False,
                     constant: float = 0.0) -> PathFunctional:
    """Tabulate phi on each distinct generator of ``model``.

    ``indicator`` chooses whether the corridor test for corridor variance looks at
    the current state ("source") or the jump destination ("destination").
    ``gamma_weight="unit"`` drops the S'/S factor from the gamma integrand.
    """
    if kind not in KINDS:
        raise MomentError(f"unknown functional kind {kind!r}")
    if kind in ("corridor_variance", "occupation") and corridor is None:
        raise MomentError(f"{kind} functional needs a corridor")
    if indicator not in ("source", "destination"):
        raise MomentError(f"indicator must be 'source' or 'destination', got {indicator!r}")
    s = model.prices
    ind = corridor.indicator(s) if corridor is not None else np.ones_like(s)
    tables = {}
    for iv in model.time_grid.intervals:
        L = iv.generator.entries
        if id(L) in tables:
            continue
        if kind == "variance":
            phi = instantaneous_variance(L, s)
        elif kind == "corridor_variance":
            if indicator == "source":
                phi = instantaneous_variance(L, s) * ind
            else:
                phi = instantaneous_variance(L, s, weight=ind[None, :])
        elif kind == "occupation":
            phi = ind.copy()
        elif kind == "gamma":
            w = None if gamma_weight == "unit" else s[None, :] / s[:, None]
            phi = instantaneous_variance(L, s, weight=w)
            if spot_weight:
                phi = phi * s / model.S0
        else:
            phi = np.full(len(s), float(constant))
        tables[id(L)] = phi
    return PathFunctional(kind, tables, corridor, indicator)


def deform(L, phi, eps: float) -> np.ndarray:
    """``L + eps diag(phi)``; not a generator any more (rows need not sum to zero)."""
    a = np.array(getattr(L, "entries", L), dtype=float)
    a[np.diag_indices_from(a)] += eps * np.asarray(phi, dtype=float)
    return a


@dataclass
class BridgeMoments:
    raw: np.ndarray             # raw[n-1, y2] = E[I^n delta(y_t - y2) | y_T = y1]
    transition: np.ndarray      # U(y1, y2)
    span: tuple
    source: int
    floor: float = TRANSITION_FLOOR

    @property
    def order(self) -> int:
        return self.raw.shape[0]

    @property
    def normalized(self) -> np.ndarray:
        ok = self.transition > self.floor
        out = np.full_like(self.raw, np.nan)
        out[:, ok] = self.raw[:, ok] / self.transition[ok]
        return out

    def unconditional(self) -> np.ndarray:
        return self.raw.sum(axis=1)

    def to_csv(self, path, model) -> None:
        norm = self.normalized
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y2", "x", "a", "b", "U"] + [f"m{k}" for k in (1, 2, 3)]
                       + [f"norm_m{k}" for k in (1, 2, 3)])
            for y2 in range(len(self.transition)):
                raw = [repr(float(self.raw[k, y2])) if k < self.order else "" for k in range(3)]
                nm = ["" if k >= self.order or np.isnan(norm[k, y2]) else repr(float(norm[k, y2]))
                      for k in range(3)]
                w.writerow([y2, *model.state_label(y2), repr(float(self.transition[y2]))] + raw + nm)


BIVARIATE_KEYS = ("m10", "m01", "m20", "m02", "m11")


@dataclass
class BivariateBridgeMoments:
    raw: dict
    transition: np.ndarray
    span: tuple
    source: int
    floor: float = TRANSITION_FLOOR

    @property
    def normalized(self) -> dict:
        ok = self.transition > self.floor
        out = {}
        for k, v in self.raw.items():
            n = np.full_like(v, np.nan)
            n[ok] = v[ok] / self.transition[ok]
            out[k] = n
        return out


def _start_row(model, y1):
    row = np.zeros(model.n_states)
    row[model.initial_state if y1 is None else y1] = 1.0
    return row


def _deformed_row(model, row, ivs, functionals, eps: tuple, local: dict) -> np.ndarray:
    """Propagate ``row`` through the deformed kernels of each interval.

    Deformed kernels depend on eps (hence on the span), so they live in the
    per-call ``local`` cache rather than on the model.
    """
    for iv in ivs:
        if all(e == 0 for e in eps):
            row = row @ model.cache.interval(iv)
            continue
        L = iv.generator.entries
        phis = [f.on(iv) for f in functionals]
        key = ("D", id(L), round(iv.length, 12)) + tuple(
            (_key(p), float(e)) for p, e in zip(phis, eps) if e != 0)
        shift = sum(e * p for p, e in zip(phis, eps))
        if key not in local:
            local[key] = expm_squaring(deform(L, shift, 1.0), iv.length, tol=model.tol)
        kernel = local[key]
        row = row @ kernel
    return row


def _eps_for(functional, ivs, duration, eps_base):
    scale = functional.max_abs(ivs) * duration
    return 0.0 if scale == 0 else eps_base / scale


def moments_fd(model, functional: PathFunctional, T: float, t: float, order: int = 2,
               y1: Optional[int] = None, eps_base: float = DEFAULT_EPS,
               floor: float = TRANSITION_FLOOR) -> BridgeMoments:
    """Moments of orders 1..order from central eps-stencils of deformed kernels."""
    if order not in (1, 2, 3):
        raise MomentError(f"order must be 1, 2 or 3, got {order}")
    ivs = model.intervals(T, t)
    start = _start_row(model, y1)
    local = {}
    u = _deformed_row(model, start, ivs, [functional], (0.0,), local)
    raw = np.zeros((order, model.n_states))
    eps = _eps_for(functional, ivs, t - T, eps_base)
    if eps > 0:
        p = {0: u}
        ks = (1, -1, 2, -2) if order == 3 else (1, -1)
        for k in ks:
            p[k] = _deformed_row(model, start, ivs, [functional], (k * eps,), local)
        raw[0] = (p[1] - p[-1]) / (2 * eps)
        if order >= 2:
            raw[1] = (p[1] - 2 * p[0] + p[-1]) / eps ** 2
        if order == 3:
            raw[2] = (p[2] - 2 * p[1] + 2 * p[-1] - p[-2]) / (2 * eps ** 3)
    if not np.all(np.isfinite(raw)):
        raise MomentError("non-finite stencil output")
    return BridgeMoments(raw, u, (T, t), int(start.argmax()), floor)


def _multi_indices(k: int, degree: int) -> list:
    idx = [a for a in itertools.product(range(degree + 1), repeat=k) if sum(a) <= degree]
    return sorted(idx, key=lambda a: (sum(a), a))


def _add(a, b):
    return tuple(x + y for x, y in zip(a, b))


def series_exponential(L, phis, delta: float, degree: int, tol: float) -> dict:
    """Kernel of the block generator with L on the diagonal and diag(phi_j) shifting index j.

    Returns {multi-index: matrix}; the zero index holds the deviation U - I and
    entry ``alpha`` equals ``E[prod I_j^alpha_j delta] / prod alpha_j!``.
    """
    L = np.asarray(L, dtype=float)
    k = len(phis)
    idx = _multi_indices(k, degree)
    aug_norm = float(np.abs(L).sum(axis=1).max()) + sum(float(np.abs(p).max()) for p in phis)
    n_stab = choose_step(L, delta)[1]
    n_acc = accuracy_doublings(np.array([[aug_norm]]), delta, tol)
    n = max(n_stab, n_acc)
    dt = delta / 2 ** n
    zero = idx[0]
    d = {a: None for a in idx}
    d[zero] = dt * L
    for j, p in enumerate(phis):
        e = tuple(int(i == j) for i in range(k))
        if e in d:
            d[e] = np.diag(dt * np.asarray(p, dtype=float))
    for _ in range(n):
        new = {}
        b0 = d[zero]
        new[zero] = 2 * b0 + b0 @ b0
        for a in idx[1:]:
            acc = None
            if d[a] is not None:
                acc = 2 * d[a] + b0 @ d[a] + d[a] @ b0
            for b in idx[1:]:
                c = tuple(x - y for x, y in zip(a, b))
                if min(c) < 0 or sum(c) == 0 or d[b] is None or d.get(c) is None:
                    continue
                term = d[b] @ d[c]
                acc = term if acc is None else acc + term
            new[a] = acc
        d = new
    n_states = L.shape[0]
    return {a: (np.zeros((n_states, n_states)) if m is None else m) for a, m in d.items()}


def _series_row(model, start, ivs, functionals, degree):
    k = len(functionals)
    idx = _multi_indices(k, degree)
    zero = idx[0]
    row = {a: np.zeros(model.n_states) for a in idx}
    row[zero] = start.copy()
    for iv in ivs:
        L = iv.generator.entries
        phis = [f.on(iv) for f in functionals]
        key = ("S", id(L), round(iv.length, 12), degree) + tuple(_key(p) for p in phis)
        ser = model.cache.get(key, lambda: series_exponential(L, phis, iv.length, degree, model.tol))
        new = {}
        for a in idx:
            acc = row[a] + row[a] @ ser[zero]
            for b in idx:
                if b == a:
                    continue
                c = tuple(x - y for x, y in zip(a, b))
                if min(c) < 0:
                    continue
                acc = acc + row[b] @ ser[c]
            new[a] = acc
        row = new
    return row


def moments_exact(model, functional: PathFunctional, T: float, t: float, order: int = 2,
                  y1: Optional[int] = None, floor: float = TRANSITION_FLOOR) -> BridgeMoments:
    """Moments from the exact time-ordered Dyson terms (block-series exponential)."""
    if order not in (1, 2, 3):
        raise MomentError(f"order must be 1, 2 or 3, got {order}")
    ivs = model.intervals(T, t)
    start = _start_row(model, y1)
    row = _series_row(model, start, ivs, [functional], order)
    raw = np.array([math.factorial(n) * row[(n,)] for n in range(1, order + 1)])
    return BridgeMoments(raw, row[(0,)], (T, t), int(start.argmax()), floor)


def bivariate_moments(model, phi: PathFunctional, psi: PathFunctional, T: float, t: float,
                      y1: Optional[int] = None, eps_base: float = DEFAULT_EPS,
                      method: str = "fd", floor: float = TRANSITION_FLOOR) -> BivariateBridgeMoments:
    """First and second (incl. mixed) moments of the pair (int phi, int psi) on each bridge."""
    if phi.corridor != psi.corridor:
        raise MomentError(f"mismatched corridors {phi.corridor} and {psi.corridor}")
    ivs = model.intervals(T, t)
    start = _start_row(model, y1)
    if method == "exact":
        row = _series_row(model, start, ivs, [phi, psi], 2)
        raw = {"m10": row[(1, 0)], "m01": row[(0, 1)], "m20": 2 * row[(2, 0)],
               "m02": 2 * row[(0, 2)], "m11": row[(1, 1)]}
        return BivariateBridgeMoments(raw, row[(0, 0)], (T, t), int(start.argmax()), floor)
    if method != "fd":
        raise MomentError(f"unknown method {method!r}")
    fs = [phi, psi]
    e1 = _eps_for(phi, ivs, t - T, eps_base)
    e2 = _eps_for(psi, ivs, t - T, eps_base)

    local = {}

    def P(a, b):
        return _deformed_row(model, start, ivs, fs, (a, b), local)

    u = P(0.0, 0.0)
    zero = np.zeros(model.n_states)
    raw = {k: zero.copy() for k in BIVARIATE_KEYS}
    if e1 > 0:
        p, m = P(e1, 0.0), P(-e1, 0.0)
        raw["m10"] = (p - m) / (2 * e1)
        raw["m20"] = (p - 2 * u + m) / e1 ** 2
    if e2 > 0:
        p, m = P(0.0, e2), P(0.0, -e2)
        raw["m01"] = (p - m) / (2 * e2)
        raw["m02"] = (p - 2 * u + m) / e2 ** 2
    if e1 > 0 and e2 > 0:
        raw["m11"] = (P(e1, e2) - P(e1, -e2) - P(-e1, e2) + P(-e1, -e2)) / (4 * e1 * e2)
    for v in raw.values():
        if not np.all(np.isfinite(v)):
            raise MomentError("non-finite stencil output")
    return BivariateBridgeMoments(raw, u, (T, t), int(start.argmax()), floor)
