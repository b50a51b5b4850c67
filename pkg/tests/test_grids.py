"""Quadrature, transform, and dual-norm checks for the grid layer."""

import numpy as np
import pytest

from homoglab.grids import (
    BoxDomain,
    GridField,
    PeriodicGrid,
    TwoScaleField,
    dirichlet_eigenvalues,
    divergence_residual_norm,
    hminus1_dirichlet_norm,
    hminus1_periodic_norm,
    integer_frequency_mesh,
    integrate,
    lp_norm,
    sine_coefficients,
    sine_synthesis,
    spectral_forward,
    spectral_inverse,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        PeriodicGrid((3, 4))  # odd size
    with pytest.raises(ValueError):
        PeriodicGrid((0,))
    with pytest.raises(ValueError):
        BoxDomain((0.0,), (0.0,), (4,))  # empty box
    g = PeriodicGrid((8, 8))
    assert g.ndim == 2 and g.volume == 1.0
    assert np.isclose(g.nodes(0)[0], -0.5 + 0.5 / 8)


def test_field_validation():
    g = PeriodicGrid((4, 4))
    with pytest.raises(ValueError):
        GridField(g, np.full((4, 4, 1), np.nan))
    with pytest.raises(ValueError):
        GridField(g, np.zeros((4, 5, 1)))
    f = GridField.constant(g, [1.0, 2.0])
    assert f.components == 2


def test_integrate_constant_on_cell():
    g = PeriodicGrid((16, 16))
    f = GridField.constant(g, [2.5, -1.0])
    np.testing.assert_allclose(integrate(f), [2.5, -1.0], atol=1e-15)


def test_integrate_odd_mode_is_zero():
    g = PeriodicGrid((64, 64))
    f = GridField.from_function(g, lambda y1, y2: np.sin(2 * np.pi * y1))
    assert abs(integrate(f)[0]) <= 1e-14


def test_integrate_linear_on_unit_box():
    g = BoxDomain.unit((64, 64))
    f = GridField.from_function(g, lambda x1, x2: x1)
    np.testing.assert_allclose(integrate(f)[0], 0.5, atol=1e-12)


def test_lp_norm_zero_field():
    assert lp_norm(GridField.zeros(PeriodicGrid((8, 8)), 2), 2.0) == 0.0


def test_lp_norm_sine_analytic():
    g = PeriodicGrid((64, 64))
    f = GridField.from_function(g, lambda y1, y2: np.sqrt(2.0) * np.sin(2 * np.pi * y2))
    np.testing.assert_allclose(lp_norm(f, 2.0), 1.0, atol=1e-12)


def test_lp_norm_constant_p4():
    g = BoxDomain.unit((16, 16))
    assert np.isclose(lp_norm(GridField.constant(g, 3.0), 4.0), 3.0, atol=1e-13)


def test_lp_norm_rejects_bad_exponent():
    g = PeriodicGrid((4, 4))
    with pytest.raises(ValueError):
        lp_norm(GridField.zeros(g, 1), 0.5)


def test_spectral_constant_concentrates_at_zero():
    g = PeriodicGrid((8, 8))
    spec = spectral_forward(GridField.constant(g, 3.25))
    assert np.isclose(spec[0, 0, 0], 3.25)
    spec[0, 0, 0] = 0.0
    assert np.max(np.abs(spec)) < 1e-14


def test_spectral_cosine_splits_evenly():
    g = PeriodicGrid((16, 16))
    f = GridField.from_function(g, lambda y1, y2: np.cos(2 * np.pi * y1))
    spec = spectral_forward(f)[..., 0]
    assert np.isclose(spec[1, 0], 0.5, atol=1e-13)
    assert np.isclose(spec[-1, 0], 0.5, atol=1e-13)


def test_spectral_round_trip_random():
    rng = np.random.default_rng(3)
    g = PeriodicGrid((16, 8))
    f = GridField(g, rng.standard_normal((16, 8, 3)))
    back = spectral_inverse(spectral_forward(f), g)
    err = np.linalg.norm(back.data - f.data) / np.linalg.norm(f.data)
    assert err <= 1e-13


def test_parseval():
    rng = np.random.default_rng(4)
    g = PeriodicGrid((16, 16))
    f = GridField(g, rng.standard_normal((16, 16, 2)))
    spec = spectral_forward(f)
    lhs = lp_norm(f, 2.0) ** 2
    rhs = float(np.sum(np.abs(spec) ** 2))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, lhs)


def test_norm_homogeneity():
    rng = np.random.default_rng(5)
    g = BoxDomain.unit((8, 8))
    f = GridField(g, rng.standard_normal((8, 8, 2)))
    for p in (1.0, 2.0, 3.5):
        a = lp_norm(GridField(g, -2.5 * f.data), p)
        b = 2.5 * lp_norm(f, p)
        assert abs(a - b) <= 1e-12 * b


def test_hminus1_periodic_zero():
    assert hminus1_periodic_norm(GridField.zeros(PeriodicGrid((8, 8)), 1)) == 0.0


def test_hminus1_periodic_single_mode():
    g = PeriodicGrid((32, 32))
    f = GridField.from_function(g, lambda y1, y2: np.sin(2 * np.pi * y1))
    np.testing.assert_allclose(hminus1_periodic_norm(f), 1.0 / (2 * np.pi * np.sqrt(2)), atol=1e-10)


def _naive_periodic_divergence_norm(fld: GridField) -> float:
    """Brute-force oracle: explicit DFT sums, weight |lambda.fhat|^2/(4 pi^2 |lambda|^2)."""
    g = fld.grid
    lam = integer_frequency_mesh(g.sizes)
    mesh = g.mesh()
    total = 0.0
    flat = [ax.ravel() for ax in lam]
    for idx in range(flat[0].size):
        lvec = np.array([f[idx] for f in flat], dtype=np.float64)
        if not lvec.any():
            continue
        phase = np.zeros(g.sizes)
        for j in range(g.ndim):
            phase = phase + lvec[j] * mesh[j]
        ker = np.exp(-2j * np.pi * phase)
        coeff = np.array([(fld.data[..., c] * ker).mean() for c in range(fld.components)])
        total += abs(lvec @ coeff) ** 2 / (lvec @ lvec)
    return float(np.sqrt(total))


def test_hminus1_periodic_matches_divergence_oracle():
    rng = np.random.default_rng(6)
    g = PeriodicGrid((8, 8))
    raw = GridField(g, rng.standard_normal((8, 8, 2)))
    # band-limit below Nyquist so the spectral derivative is unambiguous
    spec = spectral_forward(raw)
    lam = integer_frequency_mesh(g.sizes).astype(float)
    keep = np.max(np.abs(lam), axis=0) <= 2
    spec *= keep[..., None]
    f = spectral_inverse(spec, g)
    div_hat = np.einsum("j...,...j->...", lam, spectral_forward(f)) * 2j * np.pi
    div = spectral_inverse(div_hat[..., None], g)
    oracle = _naive_periodic_divergence_norm(f)
    np.testing.assert_allclose(hminus1_periodic_norm(div), oracle, rtol=1e-10, atol=1e-12)


def test_hminus1_dirichlet_zero():
    g = BoxDomain.unit((8, 8))
    assert hminus1_dirichlet_norm(GridField.zeros(g, 1)) == 0.0


def test_hminus1_dirichlet_eigenfunction():
    g = BoxDomain.unit((64, 64))
    f = GridField.from_function(g, lambda x1, x2: np.sin(np.pi * x1) * np.sin(np.pi * x2))
    np.testing.assert_allclose(
        hminus1_dirichlet_norm(f), 1.0 / (2 * np.sqrt(2) * np.pi), atol=1e-8
    )


def _naive_sine_hminus1(fld: GridField) -> float:
    """Brute-force sine expansion with explicit sums."""
    g = fld.grid
    total = 0.0
    h = g.spacing
    for k1 in range(1, g.sizes[0] + 1):
        for k2 in range(1, g.sizes[1] + 1):
            e1 = np.sin(np.pi * k1 * (g.nodes(0) - g.lo[0]) / g.lengths[0])
            e2 = np.sin(np.pi * k2 * (g.nodes(1) - g.lo[1]) / g.lengths[1])
            basis = np.outer(e1, e2)
            nrm = np.sqrt(np.sum(basis**2) * h[0] * h[1])
            coeff = np.sum(fld.data[..., 0] * basis) * h[0] * h[1] / nrm
            lam = np.pi**2 * ((k1 / g.lengths[0]) ** 2 + (k2 / g.lengths[1]) ** 2)
            total += coeff**2 / lam
    return float(np.sqrt(total))


def test_hminus1_dirichlet_constant_matches_sine_oracle():
    g = BoxDomain.unit((16, 16))
    f = GridField.constant(g, 1.0)
    val = hminus1_dirichlet_norm(f)
    assert val > 0
    np.testing.assert_allclose(val, _naive_sine_hminus1(f), atol=1e-8)


def test_sine_round_trip_and_parseval():
    rng = np.random.default_rng(7)
    g = BoxDomain((0.0, -1.0), (2.0, 1.5), (8, 12))
    f = GridField(g, rng.standard_normal((8, 12, 2)))
    c = sine_coefficients(f)
    back = sine_synthesis(c, g)
    np.testing.assert_allclose(back.data, f.data, atol=1e-12)
    np.testing.assert_allclose(np.sum(c**2), lp_norm(f, 2.0) ** 2, rtol=1e-12)


def test_hminus1_subordinate_to_l2():
    rng = np.random.default_rng(8)
    g = PeriodicGrid((16, 16))
    data = rng.standard_normal((16, 16, 1))
    data -= data.mean()
    f = GridField(g, data)
    assert hminus1_periodic_norm(f) <= lp_norm(f, 2.0) + 1e-12


def test_divergence_residual_vanishes_on_curl_field():
    # F = (d psi/dx2, -d psi/dx1) for trig-polynomial psi with mixed frequencies
    g = BoxDomain.unit((32, 32))
    x1, x2 = g.mesh()
    F = np.stack(
        [
            4 * np.pi * np.sin(2 * np.pi * x1) * np.cos(4 * np.pi * x2),
            -2 * np.pi * np.cos(2 * np.pi * x1) * np.sin(4 * np.pi * x2),
        ],
        axis=-1,
    )
    assert divergence_residual_norm(F[..., :, None], g) < 1e-12


def test_divergence_residual_of_linear_field_matches_constant():
    # u = (-x1, 0): distributional divergence -1; the high modes from the
    # periodized jump are suppressed by the H^-1 weight, so the residual lands
    # close to the sine-series norm of the constant
    g = BoxDomain.unit((48, 48))
    x1, x2 = g.mesh()
    F = np.stack([-x1, np.zeros_like(x1)], axis=-1)[..., :, None]
    val = divergence_residual_norm(F, g)
    ref = hminus1_dirichlet_norm(GridField.constant(g, -1.0))
    np.testing.assert_allclose(val, ref, rtol=5e-2)


def test_two_scale_field_mean_flag():
    xg = BoxDomain.unit((4, 4))
    yg = PeriodicGrid((4, 4))
    rng = np.random.default_rng(9)
    data = rng.standard_normal((4, 4, 4, 4, 2))
    data -= data.mean(axis=(2, 3), keepdims=True)
    w = TwoScaleField(xg, yg, data, zero_y_mean=True)
    assert w.components == 2
    with pytest.raises(ValueError):
        TwoScaleField(xg, yg, data + 1.0, zero_y_mean=True)


def test_dirichlet_eigenvalues_shape():
    g = BoxDomain.unit((4, 6))
    lam = dirichlet_eigenvalues(g)
    assert lam.shape == (4, 6)
    assert np.isclose(lam[0, 0], 2 * np.pi**2)
