"""Independent references: difference quotients, sphere search, step-size scans.

Nothing in here calls derivative or support-set code; the oracles only
evaluate the black-box function they are handed. Exact checks convert the
inputs to ``Fraction`` so equalities are decided without rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np


class SeededSampler:
    """Deterministic random stream with a draw counter.

    Child samplers derived with :meth:`spawn` are independent of each other
    and of the parent, so instances can be processed in any order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.rng = np.random.default_rng(self._seq)
        self.draws = 0

    def spawn(self, key: int) -> "SeededSampler":
        child = SeededSampler(self.seed)
        child._seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        child.rng = np.random.default_rng(child._seq)
        return child

    def uniform(self, low=0.0, high=1.0, size=None):
        self.draws += 1
        return self.rng.uniform(low, high, size)

    def normal(self, size=None, scale=1.0):
        self.draws += 1
        return self.rng.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self.rng.integers(low, high, size)

    def unit_vectors(self, count: int, shape) -> np.ndarray:
        """``count`` directions uniform on the unit sphere of ``R^shape``."""
        self.draws += 1
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(k) for k in shape)
        g = self.rng.standard_normal((count,) + shape)
        norms = np.sqrt((g.reshape(count, -1) ** 2).sum(axis=1))
        return g / norms.reshape((count,) + (1,) * len(shape))


def to_exact(a):
    """Float array (or scalar) to an object array of exact ``Fraction`` values."""
    if np.isscalar(a):
        return Fraction(a)
    a = np.asarray(a)
    return np.vectorize(Fraction, otypes=[object])(a) if a.size else a.astype(object)


@dataclass
class QuotientReport:
    alphas: list
    quotients: list
    exact: bool


def directional_derivative_fd(f: Callable, x, d, alphas, exact: bool = False) -> QuotientReport:
    """One-sided difference quotients ``(f(x + a d) - f(x)) / a`` for each ``a``.

    ``exact`` is set when every quotient is bitwise equal to the first one.
    """
    alphas = list(alphas)
    if any(not a > 0 for a in alphas):
        raise ValueError("alphas must be strictly positive")
    if any(a2 >= a1 for a1, a2 in zip(alphas, alphas[1:])):
        raise ValueError("alphas must be decreasing")
    if exact:
        x, d = to_exact(x), to_exact(d)
        alphas = [Fraction(a) for a in alphas]
    x = np.asarray(x)
    d = np.asarray(d)
    base = np.asarray(f(x))
    qs = [(np.asarray(f(x + a * d)) - base) / a for a in alphas]
    same = all(np.array_equal(q, qs[0]) for q in qs[1:])
    return QuotientReport(alphas=alphas, quotients=qs, exact=same)


@dataclass
class SphereSearchResult:
    direction: np.ndarray
    value: float


def sphere_search(objective: Callable, shape, samples: int, seed: int = 0, batch: int = 4096) -> SphereSearchResult:
    """Best of ``samples`` uniformly drawn unit directions (normalized Gaussians)."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    sampler = SeededSampler(seed)
    best_v, best_d = -math.inf, None
    left = samples
    while left > 0:
        k = min(batch, left)
        for d in sampler.unit_vectors(k, shape):
            v = objective(d)
            if v > best_v:
                best_v, best_d = v, d
        left -= k
    return SphereSearchResult(direction=best_d, value=float(best_v))


@dataclass
class GridVerdict:
    ok: bool
    grid: list
    holds: list
    epsilon_claimed: object


def eta_grid_scan(f: Callable, point, direction, epsilon_claimed, intervals: int = 64,
                  eta_max: float = 1.0, slope=None) -> GridVerdict:
    """Check a claimed affine range by exact evaluation on a step grid.

    The grid is ``k * E / (intervals/2)`` for ``k = 0..intervals`` with
    ``E`` the claimed ``epsilon`` (or ``eta_max`` when it is infinite), so it
    spans ``[0, 2E]`` and contains ``E``. The slope is taken from the first
    positive grid point unless given. The verdict is true iff the affine
    equality holds at every point up to ``E`` and, for a finite claim, fails
    at the first point beyond it.
    """
    if intervals < 2 or intervals % 2:
        raise ValueError("intervals must be an even number >= 2")
    finite = epsilon_claimed != math.inf
    E = Fraction(epsilon_claimed) if finite else Fraction(eta_max)
    half = intervals // 2
    grid = [E * k / half for k in range(intervals + 1)]
    x = to_exact(point)
    d = to_exact(direction)
    base = np.asarray(f(x))
    if slope is None:
        slope = (np.asarray(f(x + grid[1] * d)) - base) / grid[1]
    else:
        slope = to_exact(slope)
    holds = [bool(np.array_equal(np.asarray(f(x + g * d)), base + g * slope)) for g in grid]
    inside = holds[: half + 1]
    if finite:
        ok = all(inside) and not holds[half + 1]
    else:
        ok = all(holds)
    return GridVerdict(ok=ok, grid=grid, holds=holds, epsilon_claimed=epsilon_claimed)
