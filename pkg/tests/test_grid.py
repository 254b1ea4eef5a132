import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate as sint
from scipy.special import erf

from choquardlab.grid import (
    BoundaryMassWarning,
    GridError,
    ScalarField,
    boundary_mass_fraction,
    grad_norm_sq,
    integrate,
    laplacian,
    make_grid,
    mass,
    resample_affine,
    riesz_convolve,
    riesz_kernel,
    truncated_riesz_transform,
)


def gauss(grid, t=1.0, c=(0.0, 0.0, 0.0)):
    return ScalarField(grid, np.exp(-(t * t) * grid.radius_sq(c)))


def newton_potential_oracle(r):
    # int e^{-|y|^2} / |x - y| dy by radial quadrature (shell theorem)
    inner = sint.quad(lambda s: s * s * math.exp(-s * s), 0, r)[0]
    outer = sint.quad(lambda s: s * math.exp(-s * s), r, math.inf)[0]
    return 4 * math.pi * (inner / r + outer)


@pytest.fixture(scope="module")
def fine():
    # spacing 0.25: the Gaussian's spectrum is below roundoff at the Nyquist frequency
    return make_grid(3, 64, 8.0)


@pytest.fixture(scope="module")
def g64():
    return make_grid(3, 64, 16.0)


def test_make_grid_spacing():
    assert make_grid(3, 64, 16.0).spacing == 0.5
    assert make_grid(3, 8, 4.0).spacing == 1.0


@pytest.mark.parametrize("args", [(2, 64, 16.0), (3, 63, 16.0), (3, 4, 1.0), (3, 64, 0.0), (3, 14, 1.0)])
def test_make_grid_rejects(args):
    with pytest.raises(GridError):
        make_grid(*args)


def test_make_grid_accepts_5_smooth():
    assert make_grid(3, 96, 48.0).spacing == 1.0


def test_spacing_times_points_is_box(g64):
    assert g64.spacing * g64.points_per_axis == 2 * g64.half_width


def test_field_rejects_nonfinite(g64):
    v = np.zeros(g64.shape)
    v[0, 0, 0] = np.nan
    with pytest.raises(GridError):
        ScalarField(g64, v)


def test_integrate_constant_and_zero(g64):
    assert integrate(ScalarField(g64, np.ones(g64.shape))) == 32768.0
    assert integrate(ScalarField.zeros(g64)) == 0.0


def test_integrate_gaussian(g64):
    oracle = sint.quad(lambda x: math.exp(-x * x), -np.inf, np.inf)[0] ** 3
    assert integrate(gauss(g64)) == pytest.approx(oracle, rel=1e-6)


def test_mass_normalized_gaussian(fine):
    f = gauss(fine) * (math.pi / 2) ** -0.75
    assert mass(f) == pytest.approx(1.0, abs=1e-8)
    assert mass(ScalarField.zeros(fine)) == 0.0
    assert mass(f * 3.0) == pytest.approx(9.0 * mass(f), rel=1e-14)


def test_grad_norm_sq(g64):
    oracle = sint.quad(lambda r: 4 * math.pi * r**2 * 4 * r**2 * math.exp(-2 * r * r), 0, np.inf)[0]
    assert grad_norm_sq(gauss(g64)) == pytest.approx(oracle, rel=1e-4)
    assert grad_norm_sq(ScalarField(g64, np.ones(g64.shape))) == pytest.approx(0.0, abs=1e-20)


def test_grad_norm_sq_dilation(fine):
    # f(t x): int |grad|^2 scales by t^(2 - dim)
    t = 1.5
    assert grad_norm_sq(gauss(fine, t)) == pytest.approx(t ** (2 - 3) * grad_norm_sq(gauss(fine)), rel=1e-8)


def test_grad_norm_sq_matches_finite_differences():
    errs = []
    for n in (32, 64):
        g = make_grid(3, n, 8.0)
        f = gauss(g, 0.7)
        h = g.spacing
        fd = sum(np.sum(((np.roll(f.values, -1, ax) - np.roll(f.values, 1, ax)) / (2 * h)) ** 2) for ax in range(3))
        errs.append(abs(fd * g.cell_volume - grad_norm_sq(f)) / grad_norm_sq(f))
    assert errs[1] < errs[0] / 3.5  # O(h^2)


def test_laplacian_of_gaussian(fine):
    lap = laplacian(gauss(fine)).values
    exact = (4 * fine.radius_sq() - 6) * np.exp(-fine.radius_sq())
    assert np.max(np.abs(lap - exact)) < 1e-10


def test_riesz_gaussian_at_origin_and_r2(g64):
    k = riesz_kernel(g64, 1.0)
    out = riesz_convolve(gauss(g64), k)
    i0 = g64.points_per_axis // 2
    assert out.values[i0, i0, i0] == pytest.approx(newton_potential_oracle(1e-12), rel=1e-3)
    assert newton_potential_oracle(1e-12) == pytest.approx(2 * math.pi, rel=1e-9)
    # |x| = 2 lies on a grid node (spacing 0.5)
    j = i0 + 4
    assert out.values[j, i0, i0] == pytest.approx(newton_potential_oracle(2.0), rel=1e-3)
    assert newton_potential_oracle(2.0) == pytest.approx(math.pi**1.5 * erf(2.0) / 2, rel=1e-9)


def test_riesz_zero_and_bad_mu(g64):
    k = riesz_kernel(g64, 1.0)
    assert np.all(riesz_convolve(ScalarField.zeros(g64), k).values == 0.0)
    with pytest.raises(GridError):
        riesz_kernel(g64, 3.0)
    with pytest.raises(GridError):
        riesz_kernel(g64, 0.0)


def test_riesz_refinement():
    errs = []
    for n in (32, 64):
        g = make_grid(3, n, 8.0)
        out = riesz_convolve(gauss(g), riesz_kernel(g, 1.0))
        i0 = n // 2
        errs.append(abs(out.values[i0, i0, i0] - 2 * math.pi))
    assert errs[1] < errs[0]


def test_riesz_boundary_warning():
    g = make_grid(3, 16, 2.0)
    with pytest.warns(BoundaryMassWarning):
        out = riesz_convolve(gauss(g, 0.5), riesz_kernel(g, 1.0))
    assert out.flagged


def test_truncated_transform_closed_forms():
    # N = 3: t^(3/2 - mu) J_(1/2)(t) = sqrt(2/pi) t^(1 - mu) sin t, so the radial
    # integral is elementary for mu = 1 and a sine integral for mu = 2
    from scipy.special import sici
    k = np.array([0.3, 1.0, 2.0, 7.5])
    R = 40.0
    mu1 = 4 * math.pi * (1 - np.cos(k * R)) / k**2
    assert np.allclose(truncated_riesz_transform(k, 1.0, 3, R), mu1, rtol=1e-10, atol=0)
    mu2 = 4 * math.pi * sici(k * R)[0] / k
    assert np.allclose(truncated_riesz_transform(k, 2.0, 3, R), mu2, rtol=1e-10, atol=0)
    # k = 0: the kernel's integral over the ball
    assert truncated_riesz_transform(np.array([0.0]), 1.0, 3, R)[0] == pytest.approx(2 * math.pi * R**2, rel=1e-14)


@pytest.fixture(scope="module")
def g32():
    return make_grid(3, 32, 8.0)


bumps = st.tuples(st.floats(0.6, 1.6), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))


@settings(max_examples=15, deadline=None)
@given(a=bumps, b=bumps, alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_riesz_linearity_and_symmetry(g32, a, b, alpha, beta):
    k = riesz_kernel(g32, 1.0)
    f = gauss(g32, a[0], a[1:])
    g = gauss(g32, b[0], b[1:])
    lhs = riesz_convolve(f * alpha + g * beta, k).values
    rhs = alpha * riesz_convolve(f, k).values + beta * riesz_convolve(g, k).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * (1 + np.max(np.abs(rhs)))
    fg = integrate(f.with_values(f.values * riesz_convolve(g, k).values))
    gf = integrate(g.with_values(g.values * riesz_convolve(f, k).values))
    assert fg == pytest.approx(gf, rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(a=bumps, mu=st.floats(0.3, 2.7))
def test_riesz_positivity(g32, a, mu):
    out = riesz_convolve(gauss(g32, a[0], a[1:]), riesz_kernel(g32, mu))
    assert out.values.min() >= -1e-12 * out.values.max()


def test_boundary_mass_fraction(g64):
    assert boundary_mass_fraction(gauss(g64)) < 1e-8
    assert boundary_mass_fraction(ScalarField(g64, np.ones(g64.shape))) > 0.1


def test_resample_affine_translation_and_dilation(fine):
    f = gauss(fine)
    moved = resample_affine(f, shift=(1.0, -0.5, 0.25))
    assert np.max(np.abs(moved - gauss(fine, 1.0, (1.0, -0.5, 0.25)).values)) < 1e-10
    scaled = resample_affine(f, scale=1.3)
    assert np.max(np.abs(scaled - gauss(fine, 1.3).values)) < 1e-10
