"""Choquard energy, Pohozaev functional, multiplier and Euler-Lagrange residual.

For a field ``u``, an optional spatial weight ``W`` and parameters
``(N, mu, p, b)`` the building blocks are::

    K = int |grad u|^2
    D = int int W(x) W(y) |u(x)|^p |u(y)|^p / |x - y|^mu
    E = K / 2 - b D / (2 p)
    P = K - b (N p - 2 N + mu) D / (2 p)

``P`` is the derivative of ``t -> E(t^(N/2) u(t x))`` at ``t = 1``, so it
vanishes at every critical point of the constrained energy.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import scipy.fft as sfft

from .grid import (
    BOUNDARY_TOL,
    BoundaryMassWarning,
    GridSpec,
    ScalarField,
    _riesz_apply,
    _spectral_norm_sq,
    boundary_mass_fraction,
    riesz_kernel,
)

__all__ = [
    "ParameterError",
    "DegenerateFieldError",
    "ChoquardParams",
    "EnergyBreakdown",
    "nonlocal_term",
    "energy",
    "lagrange_multiplier",
    "el_residual",
    "energy_gradient",
    "h1_identity",
]

CRITICAL_EXCLUSION = 1e-3


class ParameterError(ValueError):
    pass


class DegenerateFieldError(ValueError):
    pass


@dataclass(frozen=True)
class ChoquardParams:
    dim: int
    mu: float
    p: float
    b: float = 1.0
    a: float = 1.0

    def __post_init__(self):
        n, mu, p = self.dim, self.mu, self.p
        if n < 3:
            raise ParameterError(f"dimension must be >= 3, got {n}")
        if not 0.0 < mu < n:
            raise ParameterError(f"mu must lie in (0, {n}), got {mu}")
        lo, hi = self.p_lower, self.p_upper
        if not lo < p < hi:
            raise ParameterError(f"p = {p} outside the admissible range ({lo:.6g}, {hi:.6g})")
        if abs(p - self.p_critical) <= CRITICAL_EXCLUSION:
            raise ParameterError(
                f"p = {p} is within {CRITICAL_EXCLUSION:g} of the excluded mass-critical "
                f"exponent (2N - mu + 2)/N = {self.p_critical:.6g}"
            )
        if not self.b > 0 or not self.a > 0:
            raise ParameterError(f"b and a must be positive, got b={self.b}, a={self.a}")

    @property
    def p_lower(self) -> float:
        return (2 * self.dim - self.mu) / self.dim

    @property
    def p_upper(self) -> float:
        return (2 * self.dim - self.mu) / (self.dim - 2)

    @property
    def p_critical(self) -> float:
        return (2 * self.dim - self.mu + 2) / self.dim

    @property
    def subcritical(self) -> bool:
        return self.p < self.p_critical

    @property
    def regime(self) -> str:
        return "subcritical" if self.subcritical else "supercritical"

    @property
    def dilation_exponent(self) -> float:
        """``N p - 2 N + mu``: D scales as ``t**dilation_exponent`` under mass-preserving dilation."""
        return self.dim * self.p - 2 * self.dim + self.mu

    @property
    def scaling_denominator(self) -> float:
        """``-N p + 2 N + 2 - mu``, nonzero away from the mass-critical exponent."""
        return -self.dim * self.p + 2 * self.dim + 2 - self.mu

    def replace(self, **kw) -> "ChoquardParams":
        d = asdict(self)
        d.update(kw)
        return ChoquardParams(**d)


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    nonlocal_: float
    energy: float
    pohozaev: float
    lam: Optional[float] = None

    @classmethod
    def from_terms(cls, kinetic, nonlocal_, params: ChoquardParams, lam=None):
        b, p = params.b, params.p
        e = 0.5 * kinetic - b * nonlocal_ / (2 * p)
        pz = kinetic - b * params.dilation_exponent * nonlocal_ / (2 * p)
        return cls(float(kinetic), float(nonlocal_), float(e), float(pz), lam)

    def to_dict(self) -> dict:
        d = {
            "kinetic": self.kinetic,
            "nonlocal": self.nonlocal_,
            "energy": self.energy,
            "pohozaev": self.pohozaev,
        }
        if self.lam is not None:
            d["lambda"] = self.lam
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def odd_power(u: np.ndarray, q: float) -> np.ndarray:
    """``sign(u) |u|^q``, i.e. ``|u|^(q-1) u`` without a singular factor."""
    return np.sign(u) * np.abs(u) ** q


def _weight_values(grid: GridSpec, potential) -> Optional[np.ndarray]:
    if potential is None:
        return None
    if isinstance(potential, ScalarField):
        if potential.grid != grid:
            raise ValueError("potential lives on a different grid")
        return potential.values
    return np.broadcast_to(np.asarray(potential, dtype=float), grid.shape)


class _Evaluation:
    """All quantities derived from one nonlocal convolution of ``u``.

    Solvers evaluate this once per step; the public functions below are thin
    wrappers around it.
    """

    __slots__ = (
        "grid", "params", "u", "uhat", "kinetic", "nonlocal_", "potential",
        "nonlinear",
    )

    def __init__(self, u: np.ndarray, grid: GridSpec, params: ChoquardParams, weight=None):
        self.grid = grid
        self.params = params
        self.u = u
        self.uhat = sfft.rfftn(u)
        self.kinetic = _spectral_norm_sq(grid, self.uhat, grid.k2_rfft)
        kern = riesz_kernel(grid, params.mu)
        dens = np.abs(u) ** params.p
        if weight is not None:
            dens = dens * weight
        conv = _riesz_apply(dens, kern)
        self.nonlocal_ = float(grid.cell_volume * np.sum(dens * conv))
        # W (I * W|u|^p): the effective potential felt by u
        self.potential = conv if weight is None else conv * weight
        self.nonlinear = params.b * self.potential * odd_power(u, params.p - 1)

    @property
    def mass(self) -> float:
        return float(self.grid.cell_volume * np.sum(self.u * self.u))

    def breakdown(self, lam=None) -> EnergyBreakdown:
        return EnergyBreakdown.from_terms(self.kinetic, self.nonlocal_, self.params, lam)

    @property
    def energy(self) -> float:
        return 0.5 * self.kinetic - self.params.b * self.nonlocal_ / (2 * self.params.p)

    def multiplier(self) -> float:
        m = self.mass
        if m < 1e-12:
            raise DegenerateFieldError(f"mass {m:.3e} too small to define a multiplier")
        return (self.params.b * self.nonlocal_ - self.kinetic) / m

    def neg_laplacian(self) -> np.ndarray:
        return sfft.irfftn(self.grid.k2_rfft * self.uhat, s=self.grid.shape)

    def gradient(self) -> np.ndarray:
        return self.neg_laplacian() - self.nonlinear

    def residual(self, lam: float) -> float:
        lhs = self.neg_laplacian() + lam * self.u
        den = float(np.sqrt(np.sum(lhs * lhs)))
        if den == 0.0:
            return 0.0
        r = lhs - self.nonlinear
        return float(np.sqrt(np.sum(r * r))) / den


def _evaluate(u: ScalarField, params: ChoquardParams, potential=None) -> _Evaluation:
    if u.grid.dim != params.dim:
        raise ParameterError(f"field dimension {u.grid.dim} != params.dim {params.dim}")
    w = _weight_values(u.grid, potential)
    dens = np.abs(u.values) ** params.p
    frac = boundary_mass_fraction(u.with_values(dens))
    if frac > BOUNDARY_TOL:
        warnings.warn(
            f"boundary shell carries {frac:.2e} of the density mass", BoundaryMassWarning, stacklevel=3
        )
    return _Evaluation(u.values, u.grid, params, w)


def nonlocal_term(u: ScalarField, params: ChoquardParams, potential=None) -> float:
    """Raw double integral ``D(u)`` (no ``b/(2p)`` prefactor)."""
    return _evaluate(u, params, potential).nonlocal_


def energy(u: ScalarField, params: ChoquardParams, potential=None) -> EnergyBreakdown:
    return _evaluate(u, params, potential).breakdown()


def lagrange_multiplier(u: ScalarField, params: ChoquardParams, potential=None) -> float:
    """``(b D - K) / |u|_2^2``: the multiplier obtained by pairing the equation with ``u``."""
    return _evaluate(u, params, potential).multiplier()


def el_residual(u: ScalarField, lam: float, params: ChoquardParams, potential=None) -> float:
    """Relative L2 residual of ``-lap u + lam u = b W (I * W|u|^p) |u|^(p-2) u``.

    Normalised by ``|-lap u + lam u|_2``; the zero field returns 0.
    """
    return _evaluate(u, params, potential).residual(lam)


def energy_gradient(u: ScalarField, params: ChoquardParams, potential=None) -> ScalarField:
    """Unconstrained L2 gradient ``-lap u - b W (I * W|u|^p) |u|^(p-2) u``."""
    ev = _evaluate(u, params, potential)
    return u.with_values(ev.gradient())


def h1_identity(breakdown: EnergyBreakdown, mass_: float, params: ChoquardParams) -> tuple[float, float]:
    """Both sides of ``K + |u|^2 = 2g/(g-2) E + |u|^2`` with ``g = N p - 2 N + mu``.

    Holds whenever the Pohozaev functional vanishes.
    """
    g = params.dilation_exponent
    return breakdown.kinetic + mass_, 2 * g / (g - 2) * breakdown.energy + mass_
