"""Uniform periodic grids, spectral quadrature and free-space Riesz convolution.

Fields live on the box ``[-L, L)^dim`` sampled at ``n`` points per axis.
Integrals are plain Riemann sums (the trapezoid rule on a periodic grid),
derivatives are taken in Fourier space, and the Riesz potential
``g(x) = int f(y) |x - y|^-mu dy`` is evaluated by a zero-padded FFT
(Hockney's method) so the circular convolution reproduces the free-space one
on the original box.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import special

__all__ = [
    "GridError",
    "BoundaryMassWarning",
    "GridSpec",
    "ScalarField",
    "RieszKernelTable",
    "make_grid",
    "integrate",
    "mass",
    "grad_norm_sq",
    "laplacian",
    "riesz_kernel",
    "riesz_convolve",
    "boundary_mass_fraction",
    "truncated_riesz_transform",
    "resample_affine",
    "BOUNDARY_TOL",
]

BOUNDARY_TOL = 1e-8


class GridError(ValueError):
    """Invalid grid parameters or a field that cannot be represented."""


class BoundaryMassWarning(UserWarning):
    """A field carries non-negligible mass next to the box boundary."""


def _fft_friendly(n: int) -> bool:
    for prime in (2, 3, 5):
        while n % prime == 0:
            n //= prime
    return n == 1


@dataclass(frozen=True)
class GridSpec:
    dim: int
    points_per_axis: int
    half_width: float

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    def axis(self) -> np.ndarray:
        """1-D node coordinates ``-L + j*h``."""
        n = self.points_per_axis
        return -self.half_width + self.spacing * np.arange(n)

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis (sparse meshgrid)."""
        ax = self.axis()
        return np.meshgrid(*([ax] * self.dim), indexing="ij", sparse=True)

    def radius_sq(self, center=None) -> np.ndarray:
        xs = self.coords()
        if center is None:
            center = (0.0,) * self.dim
        r2 = np.zeros(self.shape)
        for x, c in zip(xs, center):
            r2 = r2 + (x - c) ** 2
        return r2

    def wavenumbers(self) -> list[np.ndarray]:
        """Broadcastable angular wavenumbers for the full complex FFT."""
        n, h = self.points_per_axis, self.spacing
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
        out = []
        for i in range(self.dim):
            shp = [1] * self.dim
            shp[i] = n
            out.append(k.reshape(shp))
        return out

    @functools.cached_property
    def k2_rfft(self) -> np.ndarray:
        """|k|^2 on the half-spectrum layout used by ``rfftn``."""
        n, h = self.points_per_axis, self.spacing
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
        kr = 2.0 * np.pi * np.fft.rfftfreq(n, d=h)
        k2 = np.zeros((n,) * (self.dim - 1) + (kr.size,))
        for i in range(self.dim - 1):
            shp = [1] * self.dim
            shp[i] = n
            k2 = k2 + k.reshape(shp) ** 2
        k2 = k2 + kr.reshape((1,) * (self.dim - 1) + (kr.size,)) ** 2
        k2.setflags(write=False)
        return k2

    @functools.cached_property
    def rfft_weights(self) -> np.ndarray:
        """Multiplicity of each half-spectrum column in the full spectrum."""
        n = self.points_per_axis
        w = np.full(n // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0  # n is even
        w.setflags(write=False)
        return w


def make_grid(dim: int, points_per_axis: int, half_width: float) -> GridSpec:
    """Validated grid on ``[-half_width, half_width)^dim``.

    ``points_per_axis`` must be even, at least 8 and a 5-smooth integer
    (powers of two, 48, 96, ...).
    """
    if int(dim) != dim or dim < 3:
        raise GridError(f"dim-too-small: dimension must be >= 3, got {dim}")
    n = int(points_per_axis)
    if n != points_per_axis or n < 8 or n % 2 or not _fft_friendly(n):
        raise GridError(
            f"points_per_axis must be an even 5-smooth integer >= 8, got {points_per_axis}"
        )
    if not half_width > 0 or not math.isfinite(half_width):
        raise GridError(f"half_width must be positive, got {half_width}")
    return GridSpec(int(dim), n, float(half_width))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real samples of a function on ``grid``; the values array is read-only."""

    grid: GridSpec
    values: np.ndarray
    flagged: bool = field(default=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            if v.size != self.points:
                raise GridError(f"expected {self.grid.shape} values, got shape {v.shape}")
            v = v.reshape(self.grid.shape)
        if not np.all(np.isfinite(v)):
            raise GridError("field values must be finite")
        if v is self.values and v.flags.writeable:
            v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def points(self) -> int:
        return self.grid.points_per_axis**self.grid.dim

    @classmethod
    def from_function(cls, grid: GridSpec, fn) -> "ScalarField":
        return cls(grid, np.broadcast_to(fn(*grid.coords()), grid.shape).astype(np.float64))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    def with_values(self, values: np.ndarray, flagged: bool = False) -> "ScalarField":
        return ScalarField(self.grid, values, flagged)

    def __mul__(self, c: float) -> "ScalarField":
        return self.with_values(self.values * float(c))

    __rmul__ = __mul__

    def __add__(self, other: "ScalarField") -> "ScalarField":
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return self.with_values(self.values - other.values)

    def __neg__(self) -> "ScalarField":
        return self.with_values(-self.values)


def integrate(f: ScalarField) -> float:
    return float(f.grid.cell_volume * np.sum(f.values))


def mass(f: ScalarField) -> float:
    """Squared L2 norm."""
    return float(f.grid.cell_volume * np.sum(f.values * f.values))


def _spectral_norm_sq(grid: GridSpec, fhat: np.ndarray, weight: np.ndarray) -> float:
    # Parseval on the half spectrum: sum_full |F|^2 w = sum_half mult * |F|^2 w
    s = np.sum(weight * (fhat.real**2 + fhat.imag**2) * grid.rfft_weights)
    return float(s * grid.cell_volume / grid.points_per_axis**grid.dim)


def grad_norm_sq(f: ScalarField) -> float:
    """``int |grad f|^2`` computed spectrally."""
    fhat = sfft.rfftn(f.values)
    return _spectral_norm_sq(f.grid, fhat, f.grid.k2_rfft)


def laplacian(f: ScalarField) -> ScalarField:
    g = f.grid
    out = sfft.irfftn(-g.k2_rfft * sfft.rfftn(f.values), s=g.shape)
    return f.with_values(out)


# ---------------------------------------------------------------------------
# Riesz kernel


def _radial_moment(x: np.ndarray, alpha: float, nu: float, nodes: int = 32) -> np.ndarray:
    """``F(X) = int_0^X t^alpha J_nu(t) dt`` for ``alpha + nu > -1`` and ``X >= 0``.

    Composite Gauss rule on panels of length pi (one oscillation of the
    Bessel factor).  The first panel uses a Gauss-Jacobi rule for the
    ``t^(alpha + nu)`` behaviour at the origin; the others are smooth.
    """
    x = np.asarray(x, dtype=float)
    beta = alpha + nu
    xj, wj = special.roots_jacobi(nodes, 0.0, beta)
    sj = 0.5 * (1.0 + xj)
    wj = wj * 2.0 ** (-beta - 1.0)
    xl, wl = special.roots_legendre(nodes)

    def smooth(t):
        return special.jv(nu, t) / t**nu

    def first(b):
        # int_0^b t^beta phi(t) dt with phi = J_nu(t) / t^nu
        b = np.asarray(b, dtype=float)[..., None]
        return (b[..., 0] ** (beta + 1.0)) * np.sum(wj * smooth(b * sj), axis=-1)

    def legendre(lo, hi):
        lo = np.asarray(lo, dtype=float)[..., None]
        hi = np.asarray(hi, dtype=float)[..., None]
        half = 0.5 * (hi - lo)
        t = lo + half * (1.0 + xl)
        return half[..., 0] * np.sum(wl * t**alpha * special.jv(nu, t), axis=-1)

    panel = np.floor(x / np.pi).astype(int)
    npan = int(panel.max(initial=0)) + 1
    edges = np.pi * np.arange(npan + 1)
    full = np.empty(npan)
    full[0] = first(np.pi)
    if npan > 1:
        full[1:] = legendre(edges[1:-1], edges[2:])
    cum = np.concatenate(([0.0], np.cumsum(full)))
    out = cum[panel]
    head = panel == 0
    out[head] = first(x[head])
    tail = ~head
    out[tail] += legendre(edges[panel[tail]], x[tail])
    return out


def truncated_riesz_transform(k: np.ndarray, mu: float, dim: int, radius: float) -> np.ndarray:
    """Fourier transform of ``|x|^-mu`` restricted to the ball ``|x| < radius``.

    ``(2 pi)^(d/2) k^(mu - d) int_0^(k R) t^(d/2 - mu) J_(d/2 - 1)(t) dt``,
    an entire function of ``k`` (no singularity at the origin).
    """
    k = np.asarray(k, dtype=float)
    out = np.empty_like(k)
    zero = k == 0
    sphere = 2.0 * np.pi ** (dim / 2.0) / special.gamma(dim / 2.0)
    out[zero] = sphere * radius ** (dim - mu) / (dim - mu)
    kk = k[~zero]
    nu = dim / 2.0 - 1.0
    mom = _radial_moment(kk * radius, dim / 2.0 - mu, nu)
    out[~zero] = (2.0 * np.pi) ** (dim / 2.0) * kk ** (mu - dim) * mom
    return out


def _next_fft_size(n: int) -> int:
    m = n
    while not _fft_friendly(m):
        m += 1
    return m


@dataclass(frozen=True, eq=False)
class RieszKernelTable:
    """Fourier multiplier of ``|x|^-mu`` on the 2x zero-padded grid.

    The quadrature weight ``h^dim`` is folded in.  The kernel is truncated at
    the box diameter ``R = 2 L sqrt(dim)`` (every pair of box points is closer
    than ``R``, so nothing is lost) and its exact transform is sampled on an
    oversampled periodic grid of length at least ``2 L + R``, where the
    circular convolution has no wrap-around.  The resulting lattice weights
    reproduce the free-space convolution of band-limited densities to
    spectral accuracy, with no special treatment of the singular node.
    """

    grid: GridSpec
    mu: float
    fourier_multiplier: np.ndarray
    origin_weight: float

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return (2 * self.grid.points_per_axis,) * self.grid.dim


@functools.lru_cache(maxsize=8)
def riesz_kernel(grid: GridSpec, mu: float) -> RieszKernelTable:
    if not 0.0 < mu < grid.dim:
        raise GridError(f"Riesz exponent mu must lie in (0, {grid.dim}), got {mu}")
    n, h, d = grid.points_per_axis, grid.spacing, grid.dim
    radius = 2.0 * grid.half_width * math.sqrt(d)
    big = _next_fft_size(max(2 * n, math.ceil((2.0 * grid.half_width + radius) / h) + 1))
    # integer |m|^2 on the half spectrum of the big grid; the transform depends
    # on |k| only, so it is evaluated once per distinct value
    m = np.fft.fftfreq(big, d=1.0 / big)
    m2 = (m * m).astype(np.int64)
    isum = np.zeros((big,) * (d - 1) + (big // 2 + 1,), dtype=np.int64)
    for i in range(d):
        mi = m2 if i < d - 1 else m2[: big // 2 + 1]
        shp = [1] * d
        shp[i] = mi.size
        isum = isum + mi.reshape(shp)
    dk = 2.0 * np.pi / (big * h)
    values = truncated_riesz_transform(dk * np.sqrt(np.arange(int(isum.max()) + 1)), mu, d, radius)
    weights = sfft.irfftn(values[isum], s=(big,) * d)
    del isum
    # keep the displacements -n..n-1 along each axis, in wrap-around order
    idx = np.concatenate((np.arange(n), np.arange(big - n, big)))
    table = weights[np.ix_(*([idx] * d))]
    mult = sfft.rfftn(table).real  # table is even, so its transform is real
    mult.setflags(write=False)
    return RieszKernelTable(grid, float(mu), mult, float(table[(0,) * d]))


def boundary_mass_fraction(f: ScalarField, width: int = 2) -> float:
    """Share of ``int f^2`` lying in the outer shell of ``width`` nodes."""
    v2 = f.values * f.values
    total = float(np.sum(v2))
    if total == 0.0:
        return 0.0
    n = f.grid.points_per_axis
    inner = (slice(width, n - width),) * f.grid.dim
    return max(0.0, 1.0 - float(np.sum(v2[inner])) / total)


def _riesz_apply(values: np.ndarray, kernel: RieszKernelTable) -> np.ndarray:
    n = kernel.grid.points_per_axis
    fhat = sfft.rfftn(values, s=kernel.padded_shape)
    fhat *= kernel.fourier_multiplier
    out = sfft.irfftn(fhat, s=kernel.padded_shape)
    return np.ascontiguousarray(out[(slice(0, n),) * kernel.grid.dim])


def riesz_convolve(
    f: ScalarField, kernel: RieszKernelTable, boundary_tol: float = BOUNDARY_TOL
) -> ScalarField:
    """Free-space ``int f(y) |x - y|^-mu dy`` sampled on the grid of ``f``.

    Emits :class:`BoundaryMassWarning` and returns a flagged field when the
    density is not negligible near the box boundary.
    """
    if kernel.grid != f.grid:
        raise GridError("kernel and field live on different grids")
    frac = boundary_mass_fraction(f)
    flagged = frac > boundary_tol
    if flagged:
        warnings.warn(
            f"boundary shell carries {frac:.2e} of the density mass (> {boundary_tol:.0e})",
            BoundaryMassWarning,
            stacklevel=2,
        )
    return f.with_values(_riesz_apply(f.values, kernel), flagged=flagged)


# ---------------------------------------------------------------------------
# Spectral resampling under axis-aligned affine maps


WRAP_SPACINGS = 2


def _interp_matrix(grid: GridSpec, targets: np.ndarray) -> np.ndarray:
    """Trigonometric interpolation matrix from grid nodes to ``targets`` (1-D).

    Targets more than ``WRAP_SPACINGS`` nodes beyond ``[-L, L - h]`` get zero
    rows: fields are taken to vanish outside the box rather than repeat.
    Closer targets keep the periodic interpolant, which is what the spectral
    derivatives assume and avoids a jump in the tail under tiny dilations.
    """
    n, h, L = grid.points_per_axis, grid.spacing, grid.half_width
    m = np.fft.fftfreq(n, d=1.0 / n)  # integer mode numbers
    phase = np.exp(2j * np.pi * np.outer((targets + L) / (n * h), m))
    dft = np.fft.fft(np.eye(n), axis=0)
    mat = np.real(phase @ dft) / n
    reach = WRAP_SPACINGS * h
    outside = (targets < -L - reach) | (targets > L - h + reach)
    mat[outside] = 0.0
    return mat


def resample_affine(f: ScalarField, scale: float = 1.0, shift=None) -> np.ndarray:
    """Samples of ``x -> f(scale * x - shift)`` on the grid of ``f``.

    The map is separable, so it is applied as one dense ``n x n`` interpolation
    matrix per axis.
    """
    g = f.grid
    if shift is None:
        shift = (0.0,) * g.dim
    x = g.axis()
    out = f.values
    for ax in range(g.dim):
        mat = _interp_matrix(g, scale * x - shift[ax])
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [ax])), 0, ax)
    return np.ascontiguousarray(out)
