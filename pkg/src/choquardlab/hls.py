"""Numerical audit of the Hardy-Littlewood-Sobolev inequality.

For nonnegative ``f, g`` the quotient

    |int int f(x) g(y) |x - y|^-mu| / (|f|_q |g|_r)

is bounded when ``1/q + 1/r = (2N - mu)/N`` and is then invariant under the
simultaneous dilation ``f, g -> f(t .), g(t .)``.  For ``1/q + 1/r`` below that
value the quotient of two bumps tends to zero as they move apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import DegenerateFieldError
from .grid import GridError, GridSpec, ScalarField, riesz_convolve, riesz_kernel
from .semiclassical import bump_profile

__all__ = [
    "HlsCase",
    "hls_ratio",
    "pair_ratio",
    "disjoint_decay",
    "decay_envelope",
    "dilated_gaussian",
    "EXACT",
    "SUBCRITICAL",
]

EXACT = "exact-scaling"
SUBCRITICAL = "subcritical-pair"
EXPONENT_TOL = 1e-12


@dataclass(frozen=True)
class HlsCase:
    q: float
    r: float
    mu: float
    dim: int = 3
    mode: str = EXACT

    def __post_init__(self):
        if not (self.q > 1 and self.r > 1):
            raise ValueError("q and r must exceed 1")
        if not 0 < self.mu < self.dim:
            raise ValueError(f"mu must lie in (0, {self.dim})")
        gap = 1.0 / self.q + 1.0 / self.r - self.critical_sum
        if self.mode == EXACT:
            if abs(gap) > EXPONENT_TOL:
                raise ValueError(f"1/q + 1/r misses (2N - mu)/N by {gap:.3e}")
        elif self.mode == SUBCRITICAL:
            if not gap < 0:
                raise ValueError("subcritical pair needs 1/q + 1/r < (2N - mu)/N")
        else:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def critical_sum(self) -> float:
        return (2 * self.dim - self.mu) / self.dim


def _lp_norm(f: ScalarField, q: float) -> float:
    return (f.grid.cell_volume * float(np.sum(np.abs(f.values) ** q))) ** (1.0 / q)


def pair_ratio(f: ScalarField, g: ScalarField, case: HlsCase) -> float:
    """The HLS quotient for either mode; no exponent check."""
    if f.grid != g.grid:
        raise GridError("f and g live on different grids")
    if f.grid.dim != case.dim:
        raise ValueError("field dimension does not match the case")
    if np.any(f.values < 0) or np.any(g.values < 0):
        raise ValueError("f and g must be nonnegative")
    den = _lp_norm(f, case.q) * _lp_norm(g, case.r)
    if den == 0.0:
        raise DegenerateFieldError("zero denominator: f or g vanishes")
    pot = riesz_convolve(g, riesz_kernel(f.grid, case.mu))
    num = f.grid.cell_volume * float(np.sum(f.values * pot.values))
    return abs(num) / den


def hls_ratio(f: ScalarField, g: ScalarField, case: HlsCase) -> float:
    if case.mode != EXACT:
        raise ValueError("hls_ratio needs an exact-scaling case")
    return pair_ratio(f, g, case)


def _bump_pair(grid: GridSpec, separation: float, width: float):
    L, h = grid.half_width, grid.spacing
    if width <= 2 * h:
        raise GridError(f"bump width {width} is not resolved by spacing {h}")
    if separation / 2 + width > L - 2 * h:
        raise GridError(f"separation {separation} does not fit the box (half width {L})")
    c = separation / 2
    shift = (c,) + (0.0,) * (grid.dim - 1)
    f = bump_profile(np.sqrt(grid.radius_sq(tuple(-x for x in shift))) / width)
    g = bump_profile(np.sqrt(grid.radius_sq(shift)) / width)
    return ScalarField(grid, f), ScalarField(grid, g)


def disjoint_decay(separation: float, case: HlsCase, width: float, grid: GridSpec) -> float:
    """Quotient for two unit bumps of radius ``width`` whose centers are ``separation`` apart.

    The supports are disjoint once ``separation > 2 * width``; the gap between
    them is ``separation - 2 * width``.
    """
    if case.mode != SUBCRITICAL:
        raise ValueError("disjoint_decay needs a subcritical-pair case")
    if not separation > 2 * width:
        raise ValueError("bump supports overlap")
    f, g = _bump_pair(grid, separation, width)
    return pair_ratio(f, g, case)


def decay_envelope(separation: float, case: HlsCase, width: float, grid: GridSpec) -> float:
    """Kernel bound ``gap^-mu |f|_1 |g|_1 / (|f|_q |g|_r)`` for the same pair."""
    f, g = _bump_pair(grid, separation, width)
    l1 = _lp_norm(f, 1.0) * _lp_norm(g, 1.0)
    return (separation - 2 * width) ** (-case.mu) * l1 / (_lp_norm(f, case.q) * _lp_norm(g, case.r))


def dilated_gaussian(grid: GridSpec, t: float, center=None) -> ScalarField:
    """``exp(-|t (x - c)|^2)``."""
    return ScalarField(grid, np.exp(-(t * t) * grid.radius_sq(center)))

