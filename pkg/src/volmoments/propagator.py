"""Transition kernels by linear fast exponentiation (repeated squaring of I + dt L)."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

DEFAULT_TOL = 1e-10
MAX_DOUBLINGS = 60


class PropagatorError(ValueError):
    pass


def _entries(L) -> np.ndarray:
    return np.asarray(getattr(L, "entries", L), dtype=float)


def choose_step(L, delta: float) -> tuple:
    """Largest dyadic step ``delta / 2**n`` with ``min_y (1 + dt L(y, y)) >= 1/2``."""
    if delta <= 0:
        raise PropagatorError(f"span must be positive, got {delta}")
    a = _entries(L)
    q = max(-float(a.diagonal().min()), 0.0) if a.size else 0.0
    n = 0
    while 1.0 - (delta / 2 ** n) * q < 0.5:
        n += 1
    return delta / 2 ** n, n


def accuracy_doublings(L, delta: float, tol: float = DEFAULT_TOL) -> int:
    """Doublings needed so the first-order bias ``delta * dt * |L|^2 / 2`` stays below ``tol``."""
    a = _entries(L)
    norm = float(np.abs(a).sum(axis=1).max()) if a.size else 0.0
    need = (delta * norm) ** 2 / (2.0 * tol)
    return 0 if need <= 1.0 else min(int(math.ceil(math.log2(need))), MAX_DOUBLINGS)


def elementary_step(L, dt: float) -> np.ndarray:
    a = _entries(L)
    u = np.eye(a.shape[0]) + dt * a
    if a.size and u.diagonal().min() < 0.5:
        raise PropagatorError(f"step dt={dt} violates min(1 + dt L(y,y)) >= 1/2")
    return u


def square_deviation(b: np.ndarray, n: int) -> np.ndarray:
    """Square ``I + b`` n times, carrying only the deviation from identity.

    ``(I + b)^2 = I + (2 b + b @ b)`` is exact algebra; keeping the identity out
    of the product avoids cancellation when ``b`` is tiny.
    """
    for _ in range(n):
        b = 2.0 * b + b @ b
    return b


def expm_squaring(a, delta: float, n: Optional[int] = None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``(I + dt a)^(2^n)`` with ``dt = delta / 2^n``; works for non-conservative ``a`` too."""
    a = _entries(a)
    n_stab = choose_step(a, delta)[1]
    if n is None:
        n = max(n_stab, accuracy_doublings(a, delta, tol))
    elif n < n_stab:
        raise PropagatorError(f"n={n} doublings violates the step condition (need >= {n_stab})")
    dt = delta / 2 ** n
    return np.eye(a.shape[0]) + square_deviation(dt * a, n)


@dataclass(frozen=True)
class Propagator:
    entries: np.ndarray
    span: tuple

    @property
    def n_states(self) -> int:
        return self.entries.shape[0]

    def clamped(self) -> np.ndarray:
        return np.clip(self.entries, 0.0, None)

    def __matmul__(self, other: "Propagator") -> "Propagator":
        if abs(self.span[1] - other.span[0]) > 1e-12:
            raise PropagatorError(f"cannot compose spans {self.span} and {other.span}")
        return Propagator(self.entries @ other.entries, (self.span[0], other.span[1]))

    def save(self, path) -> None:
        """Raw dump: 8-byte magic, int64 state count, two float64 times, row-major float64 entries."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<qdd", self.n_states, float(self.span[0]), float(self.span[1])))
            fh.write(np.ascontiguousarray(self.entries, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Propagator":
        raw = Path(path).read_bytes()
        if raw[:8] != _MAGIC:
            raise PropagatorError(f"{path}: not a propagator dump")
        n, t1, t2 = struct.unpack("<qdd", raw[8:32])
        data = np.frombuffer(raw[32:], dtype="<f8")
        if data.size != n * n:
            raise PropagatorError(f"{path}: expected {n * n} entries, found {data.size}")
        return cls(data.reshape(n, n).copy(), (t1, t2))


_MAGIC = b"VMPROP1\x00"


def fast_exponentiate(L, delta: float, n: Optional[int] = None, tol: float = DEFAULT_TOL,
                      t0: float = 0.0) -> Propagator:
    """Propagator over a span of length ``delta`` for a constant generator.

    With ``n=None`` the number of doublings is the larger of the stability
    requirement and what keeps the first-order bias below ``tol``.
    """
    return Propagator(expm_squaring(L, delta, n=n, tol=tol), (t0, t0 + delta))


@dataclass(frozen=True)
class TimeInterval:
    t0: float
    t1: float
    generator: object
    dt: float
    n: int

    @property
    def length(self) -> float:
        return self.t1 - self.t0


@dataclass(frozen=True)
class TimeGrid:
    intervals: tuple

    @classmethod
    def from_generators(cls, generators: Sequence) -> "TimeGrid":
        out = []
        for g in generators:
            t0, t1 = g.interval
            dt, n = choose_step(g, t1 - t0)
            out.append(TimeInterval(t0, t1, g, dt, n))
        for a, b in zip(out, out[1:]):
            if abs(a.t1 - b.t0) > 1e-12:
                raise PropagatorError(f"time grid gap between {a.t1} and {b.t0}")
        return cls(tuple(out))

    @property
    def boundaries(self) -> list:
        return [self.intervals[0].t0] + [iv.t1 for iv in self.intervals]

    def between(self, t1: float, t2: float) -> list:
        bounds = self.boundaries
        for t in (t1, t2):
            if not any(abs(t - b) < 1e-9 for b in bounds):
                raise PropagatorError(f"time {t} is not an interval boundary")
        if t2 < t1 - 1e-12:
            raise PropagatorError(f"t1={t1} > t2={t2}")
        return [iv for iv in self.intervals if iv.t0 >= t1 - 1e-9 and iv.t1 <= t2 + 1e-9]


class PropagatorCache:
    """Memoises per-interval kernels; intervals sharing a generator object share work."""

    def __init__(self, tol: float = DEFAULT_TOL):
        self.tol = tol
        self._store = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]

    def interval(self, iv: TimeInterval) -> np.ndarray:
        a = _entries(iv.generator)
        return self.get(("U", id(a), round(iv.length, 12)),
                        lambda: expm_squaring(a, iv.length, tol=self.tol))

    def __len__(self):
        return len(self._store)


def compose(grid: TimeGrid, t1: float, t2: float, cache: Optional[PropagatorCache] = None) -> Propagator:
    """Ordered product of interval propagators over ``[t1, t2]``."""
    cache = PropagatorCache() if cache is None else cache
    ivs = grid.between(t1, t2)
    n = ivs[0].generator.n_states if ivs else grid.intervals[0].generator.n_states
    u = np.eye(n)
    for iv in ivs:
        u = u @ cache.interval(iv)
    return Propagator(u, (t1, t2))
