"""Closed forms for the k-component limit system.

Each component ``i`` carries a coupling ``b_i`` and a mass share ``s_i``;
the aggregate energy of a split is ``sigma_s = sum_i E_{b_i}(s_i)``.  With the
scaling laws

    E_b(s a) = s^beta_mass E_b(a),    E_{s b}(a) = s^beta_coupling E_b(a)

every quantity reduces to the single number ``E_1(1)``, the ground state
energy at unit mass and unit coupling.  The solver supplies it once per grid
and the value is cached (see :class:`BaseEnergyCache`).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .functional import ChoquardParams, ParameterError
from .solver import SolverConfig, initial_guess, solve_ground_state
from .grid import GridError, GridSpec, ScalarField, mass, resample_affine

__all__ = [
    "LimitSystemSpec",
    "MassSplit",
    "SplitExponents",
    "SplitReport",
    "ResolutionError",
    "BaseEnergyCache",
    "optimal_split",
    "sigma_at_optimal",
    "sigma_of_split",
    "sigma_direct",
    "lambda_zero",
    "lambda_from_sigma",
    "split_multipliers",
    "verify_split_inequality",
    "mass_rescale_map",
    "coupling_rescale_map",
    "rescale_ground_state",
]

SIMPLEX_TOL = 1e-12
# share of |u_hat|^2 allowed in the top third of the spectrum after a compression
SPECTRAL_TOL = 1e-4
# mass lost (or wrapped in) by a rescale, relative; matches the mass post-condition
RESCALE_MASS_TOL = 1e-6


class ResolutionError(GridError):
    """A rescaled field no longer fits the grid (box or spacing)."""


@dataclass(frozen=True)
class LimitSystemSpec:
    couplings: tuple[float, ...]
    p: float
    mu: float
    dim: int = 3

    def __post_init__(self):
        b = tuple(float(x) for x in self.couplings)
        if not b:
            raise ParameterError("at least one component is required")
        if any(not x > 0 for x in b):
            raise ParameterError(f"couplings must be positive, got {b}")
        object.__setattr__(self, "couplings", b)
        ChoquardParams(self.dim, self.mu, self.p)  # exponent validation

    @classmethod
    def from_heights(cls, heights: Sequence[float], p: float, mu: float, dim: int = 3) -> "LimitSystemSpec":
        """Couplings from potential maxima, ``b_i = M_i^2``."""
        return cls(tuple(float(m) ** 2 for m in heights), p, mu, dim)

    @property
    def k(self) -> int:
        return len(self.couplings)

    @property
    def params(self) -> ChoquardParams:
        return ChoquardParams(self.dim, self.mu, self.p)

    @property
    def exponents(self) -> "SplitExponents":
        return SplitExponents.of(self.params)


@dataclass(frozen=True)
class MassSplit:
    s: tuple[float, ...]

    def __post_init__(self):
        s = tuple(float(x) for x in self.s)
        if any(not 0.0 < x < 1.0 for x in s) and s != (1.0,):
            raise ParameterError(f"mass shares must lie in (0, 1), got {s}")
        if abs(math.fsum(s) - 1.0) > SIMPLEX_TOL:
            raise ParameterError(f"mass shares must sum to 1, got {math.fsum(s)!r}")
        object.__setattr__(self, "s", s)

    @classmethod
    def from_weights(cls, w: Sequence[float]) -> "MassSplit":
        """Normalise positive weights; the last share is the complement of the others."""
        w = np.asarray(w, dtype=float)
        head = w[:-1] / w.sum()
        return cls(tuple(head) + (1.0 - math.fsum(head),))

    def __len__(self):
        return len(self.s)

    def as_array(self) -> np.ndarray:
        return np.array(self.s)


@dataclass(frozen=True)
class SplitExponents:
    beta_mass: float
    beta_coupling: float
    A_p: float
    # prefactor of lambda = -A E_b(s) / s
    A: float

    @classmethod
    def of(cls, params: ChoquardParams) -> "SplitExponents":
        d = params.scaling_denominator
        n, mu, p = params.dim, params.mu, params.p
        beta_mass = (-n * p + 2 * n - mu + 2 * p) / d
        q = (2 * p - 2) / d
        a_p = q if params.subcritical else -1.0 - q
        return cls(beta_mass, 2.0 / d, a_p, 2.0 * (-n * p + 2 * n - mu + 2 * p) / d)

    @property
    def share_exponent(self) -> float:
        """``(2p - 2) / d`` = ``beta_mass - 1``."""
        return self.beta_mass - 1.0


def _weights(spec: LimitSystemSpec) -> np.ndarray:
    return np.asarray(spec.couplings) ** (-1.0 / (spec.p - 1.0))


def optimal_split(spec: LimitSystemSpec) -> MassSplit:
    """``s_i^0 = b_i^(-1/(p-1)) / sum_j b_j^(-1/(p-1))``."""
    if spec.k == 1:
        return MassSplit((1.0,))
    return MassSplit.from_weights(_weights(spec))


def sigma_at_optimal(spec: LimitSystemSpec, base_energy: float) -> float:
    """``E_1(1) (sum_i b_i^(-1/(p-1)))^((2 - 2p)/d)``."""
    d = spec.params.scaling_denominator
    return base_energy * math.fsum(_weights(spec)) ** ((2.0 - 2.0 * spec.p) / d)


def sigma_of_split(spec: LimitSystemSpec, s: MassSplit, base_energy: float) -> float:
    """``sigma_{s0} sum_i s_i^(1 + q) (s_i^0)^(-q)`` with ``q = (2p - 2)/d``."""
    _check_split(spec, s)
    q = spec.exponents.share_exponent
    s0 = optimal_split(spec).as_array()
    terms = s.as_array() ** (1.0 + q) * s0 ** (-q)
    return sigma_at_optimal(spec, base_energy) * math.fsum(terms)


def sigma_direct(spec: LimitSystemSpec, s: MassSplit, base_energy: float) -> float:
    """``sum_i E_1(1) s_i^beta_mass b_i^beta_coupling`` straight from the scaling laws."""
    _check_split(spec, s)
    ex = spec.exponents
    b = np.asarray(spec.couplings)
    return base_energy * math.fsum(s.as_array() ** ex.beta_mass * b**ex.beta_coupling)


def lambda_zero(spec: LimitSystemSpec, base_energy: float) -> float:
    """Common multiplier of the optimally split limit system.

    Written with the denominator ``Np - N - 2 - (N - mu)``, which is ``-d``.
    """
    n, mu, p = spec.dim, spec.mu, spec.p
    pref = 2.0 * (-n * p + 2 * n - mu + 2 * p) / (n * p - n - 2 - (n - mu))
    d = spec.params.scaling_denominator
    return pref * math.fsum(_weights(spec)) ** ((-2.0 * p + 2.0) / d) * base_energy


def lambda_from_sigma(spec: LimitSystemSpec, base_energy: float) -> float:
    """``-A sigma_{s0}``: the same multiplier via the per-component identity."""
    return -spec.exponents.A * sigma_at_optimal(spec, base_energy)


def split_multipliers(spec: LimitSystemSpec, s: MassSplit, base_energy: float) -> np.ndarray:
    """``lambda_i = -A E_{b_i}(s_i) / s_i``; all equal to ``lambda_0`` only at ``s0``."""
    _check_split(spec, s)
    ex = spec.exponents
    b = np.asarray(spec.couplings)
    return -ex.A * base_energy * s.as_array() ** ex.share_exponent * b**ex.beta_coupling


def _check_split(spec: LimitSystemSpec, s: MassSplit):
    if len(s) != spec.k:
        raise ParameterError(f"split has {len(s)} shares for {spec.k} components")


@dataclass(frozen=True)
class SplitReport:
    k: int
    regime: str
    samples: int
    evaluated: int
    violations: int
    worst_margin: float

    def to_dict(self) -> dict:
        return asdict(self)


def verify_split_inequality(
    spec: LimitSystemSpec, samples: int, seed: int = 0, base_energy: Optional[float] = None
) -> SplitReport:
    """Sample the simplex uniformly and compare ``sigma_s`` with ``sigma_{s0}``.

    The expected ordering is ``sigma_s < sigma_{s0}`` for subcritical and
    ``sigma_s > sigma_{s0}`` for supercritical ``p``.  The margin is the signed
    gap in the expected direction, in units of ``|E_1(1)|``; a violation is a
    margin ``<= 0``.  ``base_energy`` defaults to ``-1`` / ``+1`` (the sign of
    ``E_1(1)`` in each regime), which leaves every sign unchanged.  Samples
    within ``1e-12`` of ``s0`` are the equality case and are skipped.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    params = spec.params
    if base_energy is None:
        base_energy = -1.0 if params.subcritical else 1.0
    rng = np.random.default_rng(seed)
    s0 = optimal_split(spec).as_array()
    ref = sigma_at_optimal(spec, base_energy)
    sign = 1.0 if params.subcritical else -1.0
    worst = math.inf
    evaluated = violations = 0
    for _ in range(samples):
        w = rng.dirichlet(np.ones(spec.k))
        if np.max(np.abs(w - s0)) < SIMPLEX_TOL or np.any(w <= 0.0):
            continue
        s = MassSplit.from_weights(w)
        margin = sign * (ref - sigma_of_split(spec, s, base_energy)) / abs(base_energy)
        evaluated += 1
        violations += margin <= 0.0
        worst = min(worst, margin)
    return SplitReport(spec.k, params.regime, samples, evaluated, int(violations), worst)


# ---------------------------------------------------------------------------
# Explicit rescalings between ground states


def _rescale(v: ScalarField, amp: float, scale: float) -> ScalarField:
    out = v.with_values(resample_affine(v, scale=scale))
    base = mass(v)
    if base > 0.0:
        # change of variables: mass(v(scale x)) = scale^-N mass(v) when nothing leaves the box
        drift = abs(scale**v.grid.dim * mass(out) / base - 1.0)
        if drift > RESCALE_MASS_TOL:
            raise ResolutionError(f"rescaled field does not fit the box (mass drift {drift:.2e})")
    out = out.with_values(amp * out.values)
    if scale > 1.0:
        tail = _spectral_tail(out)
        if tail > SPECTRAL_TOL:
            raise ResolutionError(f"rescaled field is under-resolved (spectral tail {tail:.2e})")
    return out


def _spectral_tail(f: ScalarField) -> float:
    g = f.grid
    power = np.abs(np.fft.fftn(f.values)) ** 2
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    cut = g.points_per_axis // 3
    m = np.abs(np.fft.fftfreq(g.points_per_axis, d=1.0 / g.points_per_axis))
    high = np.zeros(g.shape, dtype=bool)
    for ax in range(g.dim):
        shape = [1] * g.dim
        shape[ax] = m.size
        high |= (m > cut).reshape(shape)
    return float(power[high].sum()) / total


def mass_rescale_map(v: ScalarField, s: float, params: ChoquardParams) -> ScalarField:
    """``u(x) = s^((2 + N - mu)/(2d)) v(s^((p-1)/d) x)``: a ground state of mass ``s a``."""
    if not s > 0:
        raise ValueError("s must be positive")
    d = params.scaling_denominator
    n, mu, p = params.dim, params.mu, params.p
    return _rescale(v, s ** ((2 + n - mu) / (2 * d)), s ** ((p - 1) / d))


def coupling_rescale_map(v: ScalarField, s: float, params: ChoquardParams) -> ScalarField:
    """``u(x) = s^(N/(2d)) v(s^(1/d) x)``: a ground state for coupling ``s b``, same mass."""
    if not s > 0:
        raise ValueError("s must be positive")
    d = params.scaling_denominator
    return _rescale(v, s ** (params.dim / (2 * d)), s ** (1.0 / d))


def rescale_ground_state(v: ScalarField, s: float, b: float, params: ChoquardParams) -> ScalarField:
    """Mass map by ``s`` followed by coupling map by ``b``, applied as one resampling.

    Turns the ``(b, a)`` ground state ``v`` into the ``(b * params.b, s * a)``
    one.  Composing first avoids an intermediate field that may not fit the box.
    """
    if not (s > 0 and b > 0):
        raise ValueError("s and b must be positive")
    d = params.scaling_denominator
    n, mu, p = params.dim, params.mu, params.p
    amp = s ** ((2 + n - mu) / (2 * d)) * b ** (n / (2 * d))
    return _rescale(v, amp, s ** ((p - 1) / d) * b ** (1.0 / d))


# ---------------------------------------------------------------------------
# E_1(1) cache


@dataclass(frozen=True)
class BaseEnergy:
    value: float
    dim: int
    points_per_axis: int
    half_width: float
    mu: float
    p: float
    residual: float
    iterations: int

    @property
    def key(self) -> str:
        return _cache_key(self.dim, self.points_per_axis, self.half_width, self.mu, self.p)


def _cache_key(dim, n, half_width, mu, p) -> str:
    return f"dim={dim};n={n};L={half_width!r};mu={mu!r};p={p!r}"


class BaseEnergyCache:
    """Write-once store of ``E_1(1)`` values keyed by grid and exponents.

    Optionally backed by a JSON file; entries are never overwritten, and a
    conflicting second value raises.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: dict[str, BaseEnergy] = {}
        if path and os.path.exists(path):
            with open(path) as fh:
                for rec in json.load(fh):
                    e = BaseEnergy(**rec)
                    self._entries[e.key] = e

    def lookup(self, grid: GridSpec, mu: float, p: float) -> Optional[BaseEnergy]:
        return self._entries.get(_cache_key(grid.dim, grid.points_per_axis, grid.half_width, mu, p))

    def store(self, entry: BaseEnergy) -> BaseEnergy:
        old = self._entries.get(entry.key)
        if old is not None:
            if old.value != entry.value:
                raise ValueError(f"cache entry {entry.key} already holds {old.value!r}")
            return old
        self._entries[entry.key] = entry
        if self.path:
            tmp = self.path + ".tmp"
            with open(tmp, "w") as fh:
                json.dump([asdict(e) for e in self._entries.values()], fh, indent=1)
            os.replace(tmp, self.path)
        return entry

    def base_energy(self, grid: GridSpec, mu: float, p: float, solver_config=None, width: Optional[float] = None):
        """``E_1(1)`` on ``grid``: cached, or computed once by the ground state solver."""
        hit = self.lookup(grid, mu, p)
        if hit is not None:
            return hit
        params = ChoquardParams(grid.dim, mu, p)
        cfg = solver_config or SolverConfig()
        seed = initial_guess(grid, params, width=width or grid.half_width / 8)
        res = solve_ground_state(seed, params, cfg)
        if not res.converged:
            raise RuntimeError(f"E_1(1) run did not converge (residual {res.residual:.2e})")
        return self.store(
            BaseEnergy(res.energy, grid.dim, grid.points_per_axis, grid.half_width, mu, p, res.residual, res.iterations)
        )
