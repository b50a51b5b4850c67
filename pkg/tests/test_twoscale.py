"""Unfolding, pairings, oscillating samplings, truncation."""

import numpy as np
import pytest

from homoglab.coefficients import layered_coefficients, make_profile
from homoglab.grids import BoxDomain, GridField, PeriodicGrid, TwoScaleField, lp_norm
from homoglab.twoscale import (
    TwoScalePairing,
    UnfoldingParams,
    oscillating_residual_schedule,
    oscillating_sequence,
    truncate,
    two_scale_pairing,
    unfold,
    unfold_defect,
    unfold_eval,
)


def test_unfold_constant():
    g = BoxDomain.unit((8,))
    u = GridField.constant(g, 2.5)
    tu = unfold(u, UnfoldingParams(0.5))
    assert np.all(tu.data == 2.5)
    assert tu.ygrid.sizes == (4,)


def test_unfold_eval_formula():
    g = BoxDomain.unit((8,))
    u = GridField.from_function(g, lambda x: x)
    val = unfold_eval(u, 0.5, [0.3], [0.25])
    np.testing.assert_allclose(val, [0.125], atol=1e-12)
    # outside the domain reads as zero
    assert np.all(unfold_eval(u, 0.5, [1.7], [0.25]) == 0.0)


def test_unfold_isometry():
    rng = np.random.default_rng(0)
    g = BoxDomain.unit((32, 32))
    u = GridField(g, rng.standard_normal((32, 32, 2)))
    for eps in (0.5, 0.25, 0.125):
        tu = unfold(u, UnfoldingParams(eps))
        meas = 1.0 / (np.prod(g.sizes) * np.prod(tu.ygrid.sizes))
        norm = np.sqrt(np.sum(tu.data**2) * meas)
        assert abs(norm - lp_norm(u, 2.0)) <= 1e-12


def test_unfold_linearity():
    rng = np.random.default_rng(1)
    g = BoxDomain.unit((16, 16))
    u = GridField(g, rng.standard_normal((16, 16, 2)))
    v = GridField(g, rng.standard_normal((16, 16, 2)))
    p = UnfoldingParams(0.25)
    left = unfold(GridField(g, 2.0 * u.data + v.data), p)
    right = 2.0 * unfold(u, p).data + unfold(v, p).data
    assert np.max(np.abs(left.data - right)) == 0.0


def test_unfold_misalignment_rejected():
    g = BoxDomain.unit((12, 12))
    u = GridField.zeros(g, 1)
    with pytest.raises(ValueError):
        unfold(u, UnfoldingParams(1.0 / 5.0))
    with pytest.raises(ValueError):
        unfold(u, UnfoldingParams(3.0))


def test_unfold_defect_zero_for_constant():
    g = BoxDomain.unit((16, 16))
    u = GridField.constant(g, [1.0, 2.0])
    assert max(unfold_defect(u, [0.5, 0.25])) == 0.0


def test_unfold_defect_decreasing_with_halving_ratio():
    g = BoxDomain.unit((128, 128))
    u = GridField.from_function(g, lambda x1, x2: np.sin(2 * np.pi * x1))
    defects = unfold_defect(u, [0.25, 0.125, 0.0625])
    assert defects[0] > defects[1] > defects[2]
    for a, b in zip(defects, defects[1:]):
        assert 0.3 <= b / a <= 0.8


def test_pairing_zero_mean_oscillation_vanishes():
    # u_eps(x) = b(x/eps) zero-mean against a y-independent test field
    g = BoxDomain.unit((512,))
    eps = 1.0 / 16
    cells = int(512 * eps)
    yg = PeriodicGrid((cells,))
    x = g.mesh()[0]
    u_eps = GridField(g, np.sin(2 * np.pi * x / eps)[:, None])
    psi = 1.0 + 0.5 * np.cos(2 * np.pi * x)
    phi = TwoScaleField(g, yg, np.broadcast_to(psi[:, None, None], (512, cells, 1)).copy())
    vals = []
    for e in (0.25, 0.125, 0.0625):
        ue = GridField(g, np.sin(2 * np.pi * x / e)[:, None])
        p = two_scale_pairing(ue, TwoScaleField(g, PeriodicGrid((int(512 * e),)),
                              np.broadcast_to(psi[:, None, None], (512, int(512 * e), 1)).copy()), e)
        vals.append(abs(p.value))
    assert max(vals) <= 1e-10  # commensurate zero-mean oscillation integrates away


def test_pairing_separable_recovers_product_limit():
    g = BoxDomain.unit((1024,))
    x = g.mesh()[0]
    psi = x
    bfun = lambda y: 1.0 + np.cos(2 * np.pi * y) + 0.5 * np.sin(4 * np.pi * y)
    errs = []
    for e in (1.0 / 8, 1.0 / 16, 1.0 / 32):
        cells = int(1024 * e)
        yg = PeriodicGrid((cells,))
        ynodes = yg.nodes(0)
        v = psi[:, None, None] * bfun(ynodes)[None, :, None]
        phi = TwoScaleField(g, yg, v)
        u_eps = GridField(g, (psi * bfun(x / e))[:, None])
        p = two_scale_pairing(u_eps, phi, e, limit=phi)
        errs.append(abs(p.value - p.limit_estimate))
    assert errs[0] > errs[1] > errs[2]
    order = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32]), np.log(errs), 1)[0]
    assert order >= 0.8


def test_pairing_fixed_field_reads_cell_average():
    g = BoxDomain.unit((64,))
    rng = np.random.default_rng(3)
    u = GridField(g, rng.standard_normal((64, 1)))
    eps = 0.25
    cells = 16
    yg = PeriodicGrid((cells,))
    phi = TwoScaleField(g, yg, rng.standard_normal((64, cells, 1)))
    p = two_scale_pairing(u, phi, eps)
    # for a fixed macroscopic u the pairing is the quadrature of
    # u . phi(x, x/eps), with the cell variable read at the wrapped position
    x = g.nodes(0)
    frac = (x / eps) % 1.0
    node = np.rint(frac * cells - 0.5 - cells / 2.0).astype(int) % cells
    samples = phi.data[np.arange(64), node, 0]
    expect = float(np.mean(u.data[:, 0] * samples))
    np.testing.assert_allclose(p.value, expect, atol=1e-13)


def test_oscillating_sequence_divfree_constant_coefficients():
    from homoglab.coefficients import identity_coefficients

    g = BoxDomain.unit((64, 64))
    yg = PeriodicGrid((16, 16))
    x1, x2 = g.mesh()
    u = GridField(g, np.stack([np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2),
                               -np.cos(2 * np.pi * x1) * np.sin(2 * np.pi * x2)], axis=-1))
    w = TwoScaleField.zeros(g, yg, 2)
    A = identity_coefficients(yg)
    res = oscillating_residual_schedule(u, w, A, [0.25, 0.125])
    assert max(res) <= 1e-10


def test_oscillating_sequence_benchmark_residual_decay():
    # the oscillating divergence residual decays linearly in eps once the
    # oscillation is resolved; x-grid 128 keeps 1/16-scale content below Nyquist
    mx, my = 128, 16
    g = BoxDomain.unit((mx, mx))
    yg = PeriodicGrid((my, my))
    s = yg.nodes(1)
    a = make_profile(np.exp(2.0 * np.cos(2 * np.pi * s)))
    A = layered_coefficients(a, yg)
    x1 = g.mesh()[0]
    u = GridField(g, np.stack([-x1, np.zeros_like(x1)], axis=-1))
    w = np.zeros((mx, mx, my, my, 2))
    w[..., 0] = (x1 - 0.5)[..., None, None] * a[None, None, None, :]
    res = oscillating_residual_schedule(u, TwoScaleField(g, yg, w), A, [0.25, 0.125, 0.0625])
    assert res[0] > res[1] > res[2]
    # first-order decay: halving ratios near 1/2
    assert 0.3 <= res[1] / res[0] <= 0.7
    assert 0.3 <= res[2] / res[1] <= 0.7


def test_truncate_inactive_below_level():
    rng = np.random.default_rng(4)
    g = BoxDomain.unit((8, 8))
    u = GridField(g, 0.5 * rng.standard_normal((8, 8, 2)))
    out = truncate(u, 10.0)
    assert np.all(out.data == u.data)


def test_truncate_radial_rescaling():
    g = BoxDomain.unit((4, 4))
    u = GridField.constant(g, [3.0, 4.0])
    out = truncate(u, 1.0)
    np.testing.assert_allclose(out.data[0, 0], [0.6, 0.8], atol=1e-14)


def test_truncate_tail_bound():
    # || tau_k u - u ||_q^q <= (2^q / k^(p-q)) ||u||_p^p for q < p
    rng = np.random.default_rng(5)
    g = BoxDomain.unit((16, 16))
    p, q = 2.0, 1.5
    for trial in range(50):
        u = GridField(g, 3.0 * rng.standard_normal((16, 16, 2)))
        for k in (1.0, 2.0, 4.0):
            diff = GridField(g, truncate(u, k).data - u.data)
            lhs = lp_norm(diff, q) ** q
            rhs = (2.0**q / k ** (p - q)) * lp_norm(u, p) ** p
            assert lhs <= rhs + 1e-12


def test_truncate_is_one_lipschitz():
    rng = np.random.default_rng(6)
    g = BoxDomain.unit((8, 8))
    for _ in range(10):
        u = GridField(g, rng.standard_normal((8, 8, 3)))
        v = GridField(g, rng.standard_normal((8, 8, 3)))
        du = GridField(g, truncate(u, 1.5).data - truncate(v, 1.5).data)
        dv = GridField(g, u.data - v.data)
        assert lp_norm(du, 2.0) <= lp_norm(dv, 2.0) + 1e-12


def test_truncate_rejects_bad_level():
    g = BoxDomain.unit((4, 4))
    with pytest.raises(ValueError):
        truncate(GridField.zeros(g, 1), 0.0)
