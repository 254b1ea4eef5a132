"""Normalized ground states of the Choquard equation.

Subcritical exponents: the energy is bounded below on the mass sphere and the
ground state is reached by a gradient flow with discrete normalization.  The
flow is the projected one, ``u_t = -(E'(u) + lam(u) u)``, with the Laplacian
acting implicitly on the increment and the nonlocal term explicit::

    (sigma - lap)(u* - u) / dt = -r(u),   r = E'(u) + lam(u) u
    u_new = sqrt(a / |u*|^2) u*

``sigma`` tracks the multiplier, which makes the step scale-free: the same
``dt`` works whatever the width of the ground state.  The preconditioned step
is projected onto the tangent space of the sphere in the ``(sigma - lap)``
inner product, so fixed points solve the Euler-Lagrange equation exactly (no
O(dt) bias from the explicit nonlocal term).

Supercritical exponents: the ground state is a saddle on the sphere, a
maximum along the dilation fiber ``t^(N/2) u(t x)`` and a minimum across it.
The step component along the fiber generator is reversed, which makes the
saddle attracting; while the iterate is far from the Pohozaev manifold the
closed-form fiber maximiser is applied after every step, and a final
dilation puts the converged state exactly on ``{P = 0}``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .functional import (
    ChoquardParams,
    DegenerateFieldError,
    EnergyBreakdown,
    ParameterError,
    _Evaluation,
    _weight_values,
)
from .grid import GridError, GridSpec, ScalarField, resample_affine

__all__ = [
    "SolverError",
    "StepSizeError",
    "FiberCollapseError",
    "SolverConfig",
    "TraceRow",
    "GroundStateResult",
    "initial_guess",
    "solve_subcritical",
    "solve_supercritical",
    "solve_ground_state",
    "pohozaev_dilate",
    "dilation_factor",
]

log = logging.getLogger(__name__)

ENERGY_SLACK = 1e-13
# the closed-form dilation is applied while the iterate is visibly off the
# Pohozaev manifold and switched off once it is within FIBER_CAPTURE
FIBER_CAPTURE = 1e-3
FIBER_RELEASE = 1e-2


class SolverError(RuntimeError):
    pass


class StepSizeError(SolverError):
    """Energy increased along a flow that must be monotone."""


class FiberCollapseError(SolverError):
    """The Pohozaev dilation factor left the admissible window."""


@dataclass(frozen=True)
class SolverConfig:
    time_step: float = 0.5
    max_iterations: int = 50000
    energy_tol: float = 1e-10
    residual_tol: float = 1e-6
    fiber_tol: float = 1e-12
    trace_every: int = 1
    # history length for Anderson mixing of the fixed-point map (0 = off);
    # only used by flows without the dilation fiber
    anderson_depth: int = 0

    def __post_init__(self):
        if not 0 < self.time_step < 1:
            raise ValueError(f"time_step must lie in (0, 1), got {self.time_step}")
        for name in ("energy_tol", "residual_tol", "fiber_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.anderson_depth < 0:
            raise ValueError("anderson_depth must be >= 0")


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    energy: float
    residual: float
    mass_drift: float


@dataclass
class GroundStateResult:
    field: ScalarField
    lam: float
    breakdown: EnergyBreakdown
    iterations: int
    converged: bool
    regime: str
    residual: float
    trace: list[TraceRow] = field(default_factory=list, repr=False)
    # False when |u| was rejected by the residual re-check (see _flow)
    sign_fixed: bool = True

    @property
    def energy(self) -> float:
        return self.breakdown.energy

    def summary(self) -> dict:
        d = {
            "energy": self.breakdown.energy,
            "lambda": self.lam,
            "kinetic": self.breakdown.kinetic,
            "nonlocal": self.breakdown.nonlocal_,
            "pohozaev": self.breakdown.pohozaev,
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "regime": self.regime,
            "sign_fixed": self.sign_fixed,
        }
        return d

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "energy", "residual", "mass_drift"])
        for row in self.trace:
            w.writerow([row.iteration, repr(row.energy), repr(row.residual), repr(row.mass_drift)])
        return buf.getvalue()


def initial_guess(
    grid: GridSpec, params: ChoquardParams, center: Sequence[float] | None = None, width: float = 1.0
) -> ScalarField:
    """Gaussian ``exp(-|x - c|^2 / width^2)`` rescaled to mass ``params.a``."""
    if width <= 2 * grid.spacing:
        raise GridError(f"under-resolved seed: width {width} <= 2 * spacing {2 * grid.spacing}")
    if center is None:
        center = (0.0,) * grid.dim
    if any(abs(c) >= grid.half_width for c in center):
        raise GridError(f"seed center {tuple(center)} outside the box")
    g = np.exp(-grid.radius_sq(center) / width**2)
    m = grid.cell_volume * np.sum(g * g)
    return ScalarField(grid, g * math.sqrt(params.a / m))


# ---------------------------------------------------------------------------
# Pohozaev fiber


def dilation_factor(kinetic: float, nonlocal_: float, params: ChoquardParams) -> float:
    """``t*`` with ``P(t^(N/2) u(t x)) = 0``: ``t*^(g-2) = 2 p K / (b g D)``, ``g = N p - 2N + mu``."""
    if nonlocal_ <= 0:
        raise DegenerateFieldError("nonlocal term vanishes: the Pohozaev fiber is degenerate")
    g = params.dilation_exponent
    return (2 * params.p * kinetic / (params.b * g * nonlocal_)) ** (1.0 / (g - 2))


def _dilate(values: np.ndarray, grid: GridSpec, t: float) -> np.ndarray:
    return t ** (grid.dim / 2) * resample_affine(ScalarField(grid, values), scale=t)


def pohozaev_dilate(
    u: ScalarField, params: ChoquardParams, fiber_tol: float = 1e-12, max_passes: int = 4
) -> tuple[ScalarField, float]:
    """Mass-preserving dilation ``t^(N/2) u(t x)`` onto ``{P = 0}``.

    The closed-form factor is exact in the continuum; on the grid it is
    re-applied until the correction is below ``fiber_tol`` (usually one extra
    pass).  Mass is restored exactly after resampling.
    """
    if params.subcritical:
        raise ParameterError("the Pohozaev fiber has a unique maximum only for supercritical p")
    a0 = float(u.grid.cell_volume * np.sum(u.values**2))
    vals = u.values
    t_total = 1.0
    for _ in range(max_passes):
        ev = _Evaluation(vals, u.grid, params)
        t = dilation_factor(ev.kinetic, ev.nonlocal_, params)
        if abs(t - 1.0) <= fiber_tol:
            break
        vals = _dilate(vals, u.grid, t)
        vals = vals * math.sqrt(a0 / (u.grid.cell_volume * np.sum(vals**2)))
        t_total *= t
    return u.with_values(vals), t_total


# ---------------------------------------------------------------------------
# Flow


def _normalize(u: np.ndarray, grid: GridSpec, target: float) -> np.ndarray:
    return u * math.sqrt(target / (grid.cell_volume * float(np.sum(u * u))))


def _flow(
    seed: ScalarField,
    params: ChoquardParams,
    cfg: SolverConfig,
    potential=None,
    project_fiber: bool = False,
    monotone: bool = True,
    unstable: Optional[Callable[[np.ndarray], list]] = None,
) -> GroundStateResult:
    """Preconditioned projected flow on the mass sphere.

    ``unstable(u)`` may return directions whose step component is reversed
    (see :func:`_reflect`); it turns saddles with known unstable directions
    into attracting fixed points.
    """
    grid = seed.grid
    if params.dim != grid.dim:
        raise ParameterError("seed dimension does not match params")
    weight = _weight_values(grid, potential)
    a = params.a
    if not np.any(seed.values):
        raise DegenerateFieldError("seed has zero mass")
    dt = cfg.time_step
    k2 = grid.k2_rfft

    u = _normalize(seed.values, grid, a)
    if project_fiber:
        u = pohozaev_dilate(ScalarField(grid, u), params, cfg.fiber_tol)[0].values
    ev = _Evaluation(u, grid, params, weight)
    e_old = ev.energy
    trace: list[TraceRow] = []
    converged = False
    dilating = project_fiber
    # the closing Pohozaev polish moves the state by O(discretization error);
    # converge deeper first so that the polished residual still meets the tolerance
    res_target = cfg.residual_tol * (0.1 if project_fiber else 1.0)
    res = math.inf
    it = 0
    mixer = _Anderson(cfg.anderson_depth) if cfg.anderson_depth and not project_fiber else None
    for it in range(1, cfg.max_iterations + 1):
        grad = ev.gradient()
        lam = ev.multiplier()
        r = grad + lam * u
        res = ev.residual(lam)

        # sigma ~ lam makes (sigma - lap)^-1 scale-free; K/a keeps it positive
        # for seeds far from a bound state
        symbol = max(lam, ev.kinetic / a) + k2
        step = _tangent_step(r, [u], symbol, grid)
        dirs = list(unstable(u)) if unstable is not None else []
        if project_fiber:
            dirs.append(_dilation_generator(u, grid))
        if dirs:
            step = _reflect(step, dirs, symbol, grid)
        u_new = _normalize(u - dt * step, grid, a)
        if mixer is not None:
            u_new = _normalize(mixer.mix(u, u_new, res), grid, a)
        if project_fiber:
            ev_tmp = _Evaluation(u_new, grid, params, weight)
            t = dilation_factor(ev_tmp.kinetic, ev_tmp.nonlocal_, params)
            if not 1e-3 <= t <= 1e3:
                raise FiberCollapseError(f"dilation factor {t:.3e} left [1e-3, 1e3] at iteration {it}")
            # hysteresis: the dilation globalises the early iterations, the
            # reflected flow alone converges onto the discrete saddle
            if abs(t - 1.0) > FIBER_RELEASE:
                dilating = True
            elif abs(t - 1.0) < FIBER_CAPTURE:
                dilating = False
            if dilating:
                u_new = _normalize(_dilate(u_new, grid, t), grid, a)
        ev_new = _Evaluation(u_new, grid, params, weight)
        e_new = ev_new.energy
        if monotone and e_new > e_old + ENERGY_SLACK:
            raise StepSizeError(
                f"energy rose from {e_old!r} to {e_new!r} at iteration {it}; reduce time_step"
            )
        if cfg.trace_every and (it % cfg.trace_every == 0 or it == 1):
            trace.append(TraceRow(it - 1, e_old, res, abs(ev.mass - a) / a))
        stalled = abs(e_new - e_old) <= cfg.energy_tol * max(abs(e_new), 1e-300)
        u, ev, e_old = u_new, ev_new, e_new
        if stalled and res <= res_target:
            converged = True
            break
    if not converged:
        log.warning("flow stopped after %d iterations with residual %.3e", it, res)

    def finish(vals):
        if project_fiber:
            vals = pohozaev_dilate(ScalarField(grid, vals), params, cfg.fiber_tol)[0].values
        ev_f = _Evaluation(vals, grid, params, weight)
        lam_f = ev_f.multiplier()
        return vals, ev_f, lam_f, ev_f.residual(lam_f)

    # sign fix: minimisers are positive, so |u| is taken once and the residual
    # re-checked.  On a moderately resolved grid the discrete minimiser rings in
    # its far tail (relative size ~1e-8, not roundoff); |u| puts kinks there
    # that can cost ~1e-6 of residual.  A fix that breaks convergence is dropped.
    sign_fixed = True
    u_raw = u
    u, ev, lam, res_final = finish(np.abs(u_raw))
    if converged and res_final > cfg.residual_tol and np.any(u_raw < 0):
        raw = finish(u_raw)
        if raw[3] <= cfg.residual_tol:
            log.info("sign fix raised the residual to %.3e; keeping the unfixed minimiser", res_final)
            u, ev, lam, res_final = raw
            sign_fixed = False
    if converged and res_final > cfg.residual_tol:
        converged = False
    trace.append(TraceRow(it, ev.energy, res_final, abs(ev.mass - a) / a))
    return GroundStateResult(
        field=ScalarField(grid, u),
        lam=lam,
        breakdown=ev.breakdown(lam),
        iterations=it,
        converged=converged,
        regime=params.regime,
        residual=res_final,
        trace=trace,
        sign_fixed=sign_fixed,
    )


class _Anderson:
    """Anderson mixing for the fixed-point map ``u -> g(u)``.

    Slow linear modes of the flow (bump drift in a flat potential converges at
    a rate ~eps^2) are extrapolated from the last ``depth`` differences.  The
    history is dropped when the residual grows, which falls back to the plain
    step.
    """

    RESTART = 2.0

    def __init__(self, depth: int):
        self.depth = depth
        self.g: list[np.ndarray] = []
        self.f: list[np.ndarray] = []
        self.best = math.inf

    def mix(self, u: np.ndarray, g: np.ndarray, res: float) -> np.ndarray:
        if res > self.RESTART * self.best:
            self.g.clear()
            self.f.clear()
            self.best = res
        self.best = min(self.best, res)
        self.g.append(g)
        self.f.append((g - u).ravel())
        if len(self.g) > self.depth + 1:
            self.g.pop(0)
            self.f.pop(0)
        if len(self.g) < 2:
            return g
        df = np.stack([b - a for a, b in zip(self.f, self.f[1:])], axis=1)
        gamma = np.linalg.lstsq(df, self.f[-1], rcond=1e-10)[0]
        out = g.copy()
        for c, a, b in zip(gamma, self.g, self.g[1:]):
            out -= c * (b - a)
        return out


def _precondition(f: np.ndarray, symbol: np.ndarray, grid: GridSpec) -> np.ndarray:
    return sfft.irfftn(sfft.rfftn(f) / symbol, s=grid.shape)


def _tangent_step(r, normals, symbol, grid) -> np.ndarray:
    """``S^-1 r`` projected, in the ``S`` inner product, onto the common tangent space.

    ``S = sigma - lap``.  With the step tangent to every constraint, the
    retractions (normalization, dilation) only act at second order, so a fixed
    point of the iteration has ``r`` in the span of the normals, i.e. it is a
    constrained critical point.
    """
    q = _precondition(r, symbol, grid)
    g = [_precondition(n, symbol, grid) for n in normals]
    gram = np.array([[np.vdot(ni, gj) for gj in g] for ni in normals])
    rhs = np.array([np.vdot(ni, q) for ni in normals])
    coef = np.linalg.solve(gram, rhs)
    for c, gj in zip(coef, g):
        q = q - c * gj
    return q


def _dilation_generator(u: np.ndarray, grid: GridSpec) -> np.ndarray:
    """``d/dt t^(N/2) u(t x)`` at ``t = 1``, i.e. ``x . grad u + N u / 2``."""
    uhat = sfft.rfftn(u)
    out = 0.5 * grid.dim * u
    for x, k in zip(grid.coords(), _rfft_wavevectors(grid)):
        out = out + x * sfft.irfftn(1j * k * uhat, s=grid.shape)
    return out


def _rfft_wavevectors(grid: GridSpec) -> list[np.ndarray]:
    # first-derivative symbols on the half spectrum; Nyquist modes zeroed so
    # the derivative of a real field stays real
    n = grid.points_per_axis
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=grid.spacing)
    if n % 2 == 0:
        k[n // 2] = 0.0
    out = []
    for axis in range(grid.dim):
        ka = k if axis < grid.dim - 1 else np.abs(k[: n // 2 + 1])
        shape = [1] * grid.dim
        shape[axis] = ka.size
        out.append(ka.reshape(shape))
    return out


def _reflect(q: np.ndarray, dirs: list, symbol: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Reverse the component of ``q`` in ``span(dirs)`` (``S`` inner product).

    A saddle whose unstable directions are (close to) ``dirs`` becomes an
    attracting fixed point of the reflected flow, and the fixed-point set is
    unchanged: the reflection is invertible, so the step vanishes iff ``q``
    does.  Used for the dilation fiber (supercritical) and for mass transfer
    between bumps (multi-bump states).
    """
    sv = [sfft.irfftn(sfft.rfftn(v) * symbol, s=grid.shape) for v in dirs]
    gram = np.array([[float(np.vdot(vi, svj)) for svj in sv] for vi in dirs])
    rhs = np.array([float(np.vdot(q, svi)) for svi in sv])
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        return q
    for c, v in zip(coef, dirs):
        q = q - 2.0 * c * v
    return q


def solve_subcritical(
    seed: ScalarField, params: ChoquardParams, cfg: SolverConfig = SolverConfig(), potential=None
) -> GroundStateResult:
    """Minimise the energy on ``{|u|^2 = a}`` for mass-subcritical ``p``."""
    if not params.subcritical:
        raise ParameterError(f"p = {params.p} is not mass-subcritical (< {params.p_critical:.6g})")
    return _flow(seed, params, cfg, potential)


def solve_supercritical(
    seed: ScalarField, params: ChoquardParams, cfg: SolverConfig = SolverConfig(), potential=None
) -> GroundStateResult:
    """Minimise the energy on ``{|u|^2 = a, P(u) = 0}`` for mass-supercritical ``p``.

    Normalized gradient steps with the fiber component reversed, alternated
    with the closed-form dilation back onto the Pohozaev manifold.  A spatial
    weight is rejected: the fiber maximiser is only closed-form without one.
    """
    if params.subcritical:
        raise ParameterError(f"p = {params.p} is not mass-supercritical (> {params.p_critical:.6g})")
    if potential is not None:
        raise ParameterError("the supercritical projection does not support a spatial weight")
    return _flow(seed, params, cfg, project_fiber=True, monotone=False)


def solve_ground_state(
    seed: ScalarField, params: ChoquardParams, cfg: SolverConfig = SolverConfig(), potential=None
) -> GroundStateResult:
    if params.subcritical:
        return solve_subcritical(seed, params, cfg, potential)
    return solve_supercritical(seed, params, cfg, potential)
