"""Two-scale divergence constraints: residuals, projections, correctors.

The constraint system on a pair (u, w) couples a macroscopic divergence
condition on the cell average of the flux A(ny)(u + w) with a per-x cell
divergence condition and a zero cell mean for w.  This module provides

* residual reports for the system,
* a direct spectral projection of a combined field onto the constraint set
  (cell fluctuation and macroscopic average handled by separate
  divergence-free projections, then mapped back through the assembled
  operator),
* minimum-distance projection onto the affine feasible set at fixed u, via
  conjugate-gradient/LSQR solves in operator form.  A reduced path exploits
  that the feasible-set geometry is x-independent: per-cell minimum-norm
  solutions for unit macroscopic data span every optimal corrector, so only
  2d small cell problems plus one flux-field solve are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy.sparse.linalg import LinearOperator, lsqr

from .coefficients import AssembledOperator, CoefficientSet, EllipticityViolation, assemble
from .grids import (
    BoxDomain,
    GridField,
    PeriodicGrid,
    TwoScaleField,
    box_torus_divergence,
    derivative_frequencies,
    fft_workers,
    hminus1_dirichlet_norm,
    integer_frequency_mesh,
)

__all__ = [
    "InfeasibleConstraint",
    "NonConvergence",
    "ResidualReport",
    "constraint_residuals",
    "coupled_project",
    "affine_feasibility_project",
    "CellProblemBasis",
    "minimum_norm_corrector",
    "spectral_constraint_maxima",
]

DEFAULT_TOL_PROJ = 1e-8


class InfeasibleConstraint(Exception):
    """The affine constraint system has no solution at the requested tolerance."""


class NonConvergence(Exception):
    """An iterative solve stopped at its cap without certifying its target."""


@dataclass
class ResidualReport:
    """Residuals of the coupled constraint system for a pair (u, w)."""

    x_residual: float
    y_residual_max: float
    y_residual_l2: float
    mean_residual: float

    def max(self) -> float:
        return max(self.x_residual, self.y_residual_max, self.mean_residual)

    def as_dict(self) -> dict:
        return {
            "x_residual": self.x_residual,
            "y_residual_max": self.y_residual_max,
            "y_residual_l2": self.y_residual_l2,
            "mean_residual": self.mean_residual,
        }


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------

def _flux(v_data: np.ndarray, Ad: np.ndarray, nx: int) -> np.ndarray:
    """A^i(ny) v pointwise: (..x, ..y, d) -> (..x, ..y, N, l)."""
    return np.einsum("...ilc,...c->...il", np.broadcast_to(Ad, v_data.shape[:-1] + Ad.shape[-3:]), v_data)


def _ydiv_weights(ygrid: PeriodicGrid) -> tuple[np.ndarray, np.ndarray]:
    """Derivative-gauge frequencies (N, *My) and H^-1 weights (*My)."""
    kappa = np.array(np.meshgrid(*derivative_frequencies(ygrid), indexing="ij"))
    lam = integer_frequency_mesh(ygrid.sizes).astype(np.float64)
    lam2 = np.sum(lam**2, axis=0)
    weight = np.zeros_like(lam2)
    nz = lam2 > 0
    weight[nz] = 1.0 / (4.0 * np.pi**2 * lam2[nz])
    return kappa, weight


def _y_divergence_coeffs(P: np.ndarray, ygrid: PeriodicGrid, yaxes: tuple[int, ...]) -> np.ndarray:
    """Normalized spectral coefficients of div_y P, shape (..x, *My, l)."""
    scale = 1.0 / float(np.prod(ygrid.sizes))
    spec = sfft.fftn(P, axes=yaxes, workers=fft_workers()) * scale
    kappa, _ = _ydiv_weights(ygrid)
    div = np.zeros(spec.shape[:-2] + spec.shape[-1:], dtype=np.complex128)
    for i in range(ygrid.ndim):
        shape = [1] * div.ndim
        for pos, ax in enumerate(yaxes):
            shape[ax] = ygrid.sizes[pos]
        div += 2j * np.pi * kappa[i].reshape(shape) * spec[..., i, :]
    return div


def constraint_residuals(u: GridField, w: TwoScaleField, A: CoefficientSet) -> ResidualReport:
    """Residuals of the coupled system for v = u + w under A(n.).

    x: H^-1 Dirichlet norm of the spectral divergence of the cell-averaged
    flux; y: per-x dual-weighted cell divergence (max and L^2 aggregate over
    x); mean: max over x of |cell mean of w|.
    """
    xgrid, ygrid = w.xgrid, w.ygrid
    nx = len(xgrid.sizes)
    Ad = A.dilated()
    v = u.data[(...,) + (None,) * len(ygrid.sizes) + (slice(None),)] + w.data
    P = _flux(v, Ad, nx)

    div = _y_divergence_coeffs(P, ygrid, w.yaxes)
    _, weight = _ydiv_weights(ygrid)
    wshape = weight.reshape((1,) * nx + weight.shape + (1,))
    per_x = np.sqrt(np.sum(np.abs(div) ** 2 * wshape, axis=tuple(range(nx, div.ndim))))
    hx = xgrid.volume / float(np.prod(xgrid.sizes))
    y_max = float(per_x.max())
    y_l2 = float(np.sqrt(np.sum(per_x**2) * hx))

    Fbar = P.mean(axis=w.yaxes)  # (*Mx, N, l)
    divx = box_torus_divergence(Fbar, xgrid)
    x_res = hminus1_dirichlet_norm(GridField(xgrid, divx.reshape(divx.shape[:nx] + (-1,))))

    mean_res = float(np.max(np.linalg.norm(w.y_mean().data, axis=-1)))
    return ResidualReport(x_res, y_max, y_l2, mean_res)


def spectral_constraint_maxima(v: TwoScaleField, A: CoefficientSet) -> tuple[float, float]:
    """Largest per-frequency constraint coefficients of a combined field.

    Returns (max_y, max_x): the per-frequency cell-divergence coefficient of
    A(ny) v maximized over x and frequency, and the torus-divergence
    coefficient of the cell-averaged flux maximized over frequency.  Both are
    zero exactly on the constraint set.
    """
    nx = len(v.xgrid.sizes)
    Ad = A.dilated()
    P = _flux(v.data, Ad, nx)
    div = _y_divergence_coeffs(P, v.ygrid, v.yaxes)
    max_y = float(np.max(np.abs(div))) if div.size else 0.0

    Fbar = P.mean(axis=v.yaxes)
    kaps = derivative_frequencies(v.xgrid)
    spec = sfft.fftn(Fbar, axes=tuple(range(nx)), workers=fft_workers()) / float(np.prod(v.xgrid.sizes))
    divx = np.zeros(spec.shape[:nx] + spec.shape[nx + 1:], dtype=np.complex128)
    for j in range(nx):
        shape = [1] * divx.ndim
        shape[j] = v.xgrid.sizes[j]
        divx += 2j * np.pi * kaps[j].reshape(shape) * spec[..., j, :]
    return max_y, float(np.max(np.abs(divx)))


# ---------------------------------------------------------------------------
# direct coupled projection
# ---------------------------------------------------------------------------

def _project_divfree_array(F: np.ndarray, grid, axes: tuple[int, ...]) -> np.ndarray:
    """Frequency-wise divergence-kernel projection; the vector axis is last.

    F may carry arbitrary batch axes anywhere except the last slot; `axes`
    are the positions of the grid axes within F.
    """
    kaps = derivative_frequencies(grid)
    spec = sfft.fftn(F, axes=axes, workers=fft_workers())

    def axis_freq(j: int) -> np.ndarray:
        shape = [1] * (spec.ndim - 1)
        shape[axes[j]] = grid.sizes[j]
        return kaps[j].reshape(shape)

    k2 = sum(axis_freq(j) ** 2 for j in range(grid.ndim))
    safe = np.where(k2 > 0, k2, 1.0)
    dot = sum(axis_freq(j) * spec[..., j] for j in range(grid.ndim))
    coef = dot / safe
    out = spec.copy()
    for j in range(grid.ndim):
        out[..., j] -= coef * axis_freq(j)
    zero = np.broadcast_to((k2 == 0.0)[..., None], out.shape)
    out[zero] = 0.0
    return sfft.ifftn(out, axes=axes, workers=fft_workers()).real


def _raised_cosine_cutoff(grid: BoxDomain, margin: float) -> np.ndarray:
    """Tensorized cutoff: 1 in the interior, cosine ramp to 0 over the margin."""
    if not 0.0 < margin <= 0.25:
        raise ValueError("cutoff margin must lie in (0, 1/4]")
    vals = np.ones(grid.sizes)
    for ax in range(grid.ndim):
        t = (grid.nodes(ax) - grid.lo[ax]) / grid.lengths[ax]
        ramp = np.ones_like(t)
        lowside = t < margin
        highside = t > 1.0 - margin
        ramp[lowside] = 0.5 * (1.0 - np.cos(np.pi * t[lowside] / margin))
        ramp[highside] = 0.5 * (1.0 - np.cos(np.pi * (1.0 - t[highside]) / margin))
        if not np.any(ramp >= 1.0 - 1e-12):
            raise ValueError("cutoff margin leaves no interior plateau")
        shape = [1] * grid.ndim
        shape[ax] = t.size
        vals = vals * ramp.reshape(shape)
    return vals


def coupled_project(v: TwoScaleField, A: CoefficientSet, margin: float = 0.125) -> TwoScaleField:
    """Project a combined field onto the coupled constraint set.

    The flux A(ny) v is split into its cell fluctuation (projected onto
    cell-divergence-free fields per x) and the x-fluctuation of its cell
    average (projected onto torus-divergence-free fields; the part that is
    not already divergence free is damped by a boundary cutoff first so the
    box periodization does not pollute the projection).  The total mean is
    kept and the result is mapped back through the inverse assembled
    operator.  Feasible inputs with constant cell-averaged flux are
    reproduced exactly, and the construction is idempotent.
    """
    op = assemble(A)  # raises EllipticityViolation when gamma <= 0
    nx = len(v.xgrid.sizes)
    ny = len(v.ygrid.sizes)
    Ad = A.dilated()
    R = _flux(v.data, Ad, nx)  # (*Mx, *My, N, l)

    Rbar = R.mean(axis=v.yaxes)  # (*Mx, N, l)
    G = R - Rbar.reshape(Rbar.shape[:nx] + (1,) * ny + Rbar.shape[nx:])

    # cell fluctuation: divergence-free projection in y, per x and per row r
    Gm = np.moveaxis(G, -2, -1)  # (*Mx, *My, l, N)
    term1 = np.moveaxis(_project_divfree_array(Gm, v.ygrid, v.yaxes), -1, -2)

    # macroscopic average: keep the divergence-free part, cut off and
    # re-project the remainder so the result stays exactly divergence free
    total_mean = Rbar.mean(axis=tuple(range(nx)))
    H = Rbar - total_mean
    Hm = np.moveaxis(H, -2, -1)  # (*Mx, l, N)
    xaxes = tuple(range(nx))
    Hdf = _project_divfree_array(Hm, v.xgrid, xaxes)
    rem = Hm - Hdf
    cut = _raised_cosine_cutoff(v.xgrid, margin)
    rem_proj = _project_divfree_array(rem * cut.reshape(cut.shape + (1, 1)), v.xgrid, xaxes)
    term2 = np.moveaxis(Hdf + rem_proj, -1, -2)

    S = term1 + (term2 + total_mean).reshape(Rbar.shape[:nx] + (1,) * ny + Rbar.shape[nx:])
    inv = op.inverse()  # assembled on the dilated samples
    Svec = S.reshape(S.shape[:-2] + (A.d,))
    w_out = np.einsum("...rc,...c->...r",
                      np.broadcast_to(inv, Svec.shape[:-1] + inv.shape[-2:]), Svec)
    return TwoScaleField(v.xgrid, v.ygrid, w_out)


# ---------------------------------------------------------------------------
# cell problems: minimum-norm solutions for unit macroscopic data
# ---------------------------------------------------------------------------

def _pack_complex(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z.real.ravel(), z.imag.ravel()])


def _unpack_complex(vec: np.ndarray, shape) -> np.ndarray:
    half = vec.size // 2
    return vec[:half].reshape(shape) + 1j * vec[half:].reshape(shape)


class _CellConstraintOperator:
    """Linear map w -> (weighted div_y coefficients, cell mean, flux mean).

    Rows are scaled so their plain Euclidean norm matches the residual
    measures: the divergence block carries the H^-1 weight, the mean and flux
    blocks the cell average.
    """

    def __init__(self, A: CoefficientSet):
        self.ygrid = A.ygrid
        self.Ad = A.dilated()
        self.mats = assemble(A).matrices  # (*My, d, d)
        self.d = A.d
        self.l = A.l
        self.ny = A.ygrid.ndim
        self.K = int(np.prod(A.ygrid.sizes)) * self.d
        kappa, weight = _ydiv_weights(A.ygrid)
        self.kappa = kappa
        self.sqrt_weight = np.sqrt(weight)
        self.ncplx = int(np.prod(A.ygrid.sizes)) * self.l
        self.rows = 2 * self.ncplx + 2 * self.d
        self.shape = (self.rows, self.K)
        self.dtype = np.float64
        self._scale = 1.0 / float(np.prod(A.ygrid.sizes))

    def _div_coeffs(self, w: np.ndarray) -> np.ndarray:
        P = np.einsum("...ilc,...c->...il", self.Ad, w)
        spec = sfft.fftn(P, axes=tuple(range(self.ny)), workers=fft_workers()) * self._scale
        div = np.zeros(spec.shape[:-2] + (self.l,), dtype=np.complex128)
        for i in range(self.ny):
            div += 2j * np.pi * self.kappa[i][..., None] * spec[..., i, :]
        return div * self.sqrt_weight[..., None]

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        w = vec.reshape(tuple(self.ygrid.sizes) + (self.d,))
        div = self._div_coeffs(w)
        mean = w.mean(axis=tuple(range(self.ny)))
        flux = np.einsum("...rc,...c->...r", self.mats, w).mean(axis=tuple(range(self.ny)))
        return np.concatenate([_pack_complex(div), mean, flux])

    def rmatvec(self, vec: np.ndarray) -> np.ndarray:
        ysz = tuple(self.ygrid.sizes)
        ncplx = self.ncplx
        div_dual = _unpack_complex(vec[: 2 * ncplx], ysz + (self.l,))
        beta = vec[2 * ncplx: 2 * ncplx + self.d]
        gamma = vec[2 * ncplx + self.d:]

        mu = div_dual * self.sqrt_weight[..., None]
        grad = np.zeros(ysz + (self.ny, self.l), dtype=np.complex128)
        for i in range(self.ny):
            grad[..., i, :] = -2j * np.pi * self.kappa[i][..., None] * mu
        # adjoint of the normalized forward FFT is the numpy inverse FFT
        grad_y = sfft.ifftn(grad, axes=tuple(range(self.ny)), workers=fft_workers())
        out = np.einsum("...ilc,...il->...c", self.Ad, grad_y).real
        scale = 1.0 / float(np.prod(ysz))
        out = out + beta * scale
        out = out + np.einsum("...rc,...r->...c", self.mats, np.broadcast_to(gamma, ysz + (self.d,))) * scale
        return out.ravel()

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.matvec, rmatvec=self.rmatvec,
                              dtype=np.float64)

    def rhs(self, u: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Right-hand side for cell data (u, q): L w = c(u, q)."""
        const = np.broadcast_to(u, tuple(self.ygrid.sizes) + (self.d,))
        div_u = self._div_coeffs(np.ascontiguousarray(const))
        mean_flux_u = np.einsum("...rc,c->...r", self.mats, u).mean(axis=tuple(range(self.ny)))
        return np.concatenate([_pack_complex(-div_u), np.zeros(self.d), q - mean_flux_u])


@dataclass
class CellProblemBasis:
    """Minimum-norm cell solutions for unit macroscopic data.

    fields[k] solves the cell system in the least-squares sense for unit
    u-component k (k < d) or unit flux-average component k-d; gram is the
    L^2(Q) Gram matrix of the fields, residual_gram the Gram of the
    constraint defects (nonzero exactly on the macroscopically infeasible
    directions), and conditions the orthonormal defect directions that the
    flux field must annihilate pointwise.
    """

    operator: _CellConstraintOperator
    fields: np.ndarray          # (2d, *My, d)
    gram: np.ndarray            # (2d, 2d)
    residual_gram: np.ndarray   # (2d, 2d)
    conditions: np.ndarray      # (ncond, 2d)
    mean_flux: np.ndarray       # (d, d): cell average of the assembled operator

    @property
    def d(self) -> int:
        return self.operator.d


def cell_problem_basis(A: CoefficientSet, tol: float = 1e-12, iter_lim: int = 4000) -> CellProblemBasis:
    """Solve the 2d unit cell problems and collect their geometry."""
    op = _CellConstraintOperator(A)
    lin = op.as_linear_operator()
    d = op.d
    fields, defects = [], []
    for k in range(2 * d):
        u = np.zeros(d)
        q = np.zeros(d)
        if k < d:
            u[k] = 1.0
        else:
            q[k - d] = 1.0
        c = op.rhs(u, q)
        sol = lsqr(lin, c, atol=tol, btol=tol, iter_lim=iter_lim)[0]
        fields.append(sol.reshape(tuple(op.ygrid.sizes) + (d,)))
        defects.append(op.matvec(sol) - c)
    fields = np.array(fields)
    defects = np.array(defects)
    ymeas = 1.0 / float(np.prod(op.ygrid.sizes))
    flat = fields.reshape(2 * d, -1)
    gram = (flat @ flat.T) * ymeas
    rgram = defects @ defects.T
    evals, evecs = np.linalg.eigh(rgram)
    cutoff = max(1e-14, 1e-6 * float(evals.max(initial=0.0)))
    conditions = evecs[:, evals > cutoff].T
    mean_flux = op.mats.reshape(-1, d, d).mean(axis=0)
    return CellProblemBasis(op, fields, gram, rgram, conditions, mean_flux)


# ---------------------------------------------------------------------------
# flux-field solve: the macroscopic stage of the minimum-norm corrector
# ---------------------------------------------------------------------------

class _FluxConstraintOperator:
    """Rows on the flux field q(x): torus divergence plus pointwise conditions."""

    def __init__(self, xgrid: BoxDomain, d: int, l: int, conditions: np.ndarray, hx: float):
        self.xgrid = xgrid
        self.d = d
        self.l = l
        self.nx = xgrid.ndim
        self.kaps = derivative_frequencies(xgrid)
        kappa = np.array(np.meshgrid(*self.kaps, indexing="ij"))
        k2 = np.sum(kappa**2, axis=0)
        self.kappa = kappa
        s = np.zeros_like(k2)
        nz = k2 > 0
        s[nz] = 1.0 / (2.0 * np.pi * np.sqrt(k2[nz]))
        self.sdiv = s
        self.cond_u = conditions[:, :d] if conditions.size else np.zeros((0, d))
        self.cond_q = conditions[:, d:] if conditions.size else np.zeros((0, d))
        self.sqrt_hx = np.sqrt(hx)
        self.nxpts = int(np.prod(xgrid.sizes))
        self.ncplx = self.nxpts * l
        self.rows = 2 * self.ncplx + self.nxpts * self.cond_q.shape[0]
        self._scale = 1.0 / float(self.nxpts)

    def _div_coeffs(self, q: np.ndarray) -> np.ndarray:
        """q: (*Mx, d) viewed as (*Mx, N, l); weighted torus div coefficients."""
        qm = q.reshape(tuple(self.xgrid.sizes) + (self.nx, self.l))
        spec = sfft.fftn(qm, axes=tuple(range(self.nx)), workers=fft_workers()) * self._scale
        div = np.zeros(spec.shape[:-2] + (self.l,), dtype=np.complex128)
        for i in range(self.nx):
            shape = [1] * div.ndim
            shape[i] = self.xgrid.sizes[i]
            div += 2j * np.pi * self.kaps[i].reshape(shape) * spec[..., i, :]
        return div * self.sdiv[..., None]

    def matvec(self, q: np.ndarray) -> np.ndarray:
        q = q.reshape(tuple(self.xgrid.sizes) + (self.d,))
        div = self._div_coeffs(q)
        point = np.einsum("jc,...c->...j", self.cond_q, q) * self.sqrt_hx
        return np.concatenate([_pack_complex(div), point.ravel()])

    def rmatvec(self, vec: np.ndarray) -> np.ndarray:
        xsz = tuple(self.xgrid.sizes)
        div_dual = _unpack_complex(vec[: 2 * self.ncplx], xsz + (self.l,))
        point = vec[2 * self.ncplx:].reshape(xsz + (self.cond_q.shape[0],))
        mu = div_dual * self.sdiv[..., None]
        grad = np.zeros(xsz + (self.nx, self.l), dtype=np.complex128)
        for i in range(self.nx):
            shape = [1] * mu.ndim
            shape[i] = xsz[i]
            grad[..., i, :] = -2j * np.pi * self.kaps[i].reshape(shape) * mu
        # adjoint of the normalized forward FFT is numpy's inverse FFT
        out = sfft.ifftn(grad, axes=tuple(range(self.nx)), workers=fft_workers()).real
        out = out.reshape(xsz + (self.d,))
        out = out + np.einsum("jc,...j->...c", self.cond_q, point) * self.sqrt_hx
        return out.ravel()

    def rhs(self, u_data: np.ndarray) -> np.ndarray:
        point = -np.einsum("jc,...c->...j", self.cond_u, u_data) * self.sqrt_hx
        return np.concatenate([np.zeros(2 * self.ncplx), point.ravel()])


def _schur_solve(apply_op, b: np.ndarray, max_iter: int) -> tuple[np.ndarray, float, int]:
    """Least-squares conjugate-gradient solve of a symmetric PSD system.

    LSQR tolerates the rank deficiency of redundant constraint rows and an
    inconsistent right-hand side (infeasible data), returning the minimum-norm
    least-squares solution in both cases.
    """
    n = b.size
    op = LinearOperator((n, n), matvec=apply_op, rmatvec=apply_op, dtype=np.float64)
    sol = lsqr(op, b, atol=1e-13, btol=1e-13, iter_lim=max_iter)
    x, itn, r1norm = sol[0], sol[2], sol[3]
    return x, float(r1norm), int(itn)


def minimum_norm_corrector(
    u: GridField,
    A: CoefficientSet,
    basis: CellProblemBasis | None = None,
    tol_proj: float = DEFAULT_TOL_PROJ,
    max_iter: int | None = None,
    materialize: bool = True,
) -> tuple[TwoScaleField | None, dict]:
    """Minimum-L^2-norm corrector w for a fixed macroscopic field u.

    Splits the constrained least-squares problem into per-cell minimum-norm
    solutions (precomputed unit basis) and a flux-field solve: the cell
    average q(x) of the flux A(ny)(u+w) must be torus divergence free and
    must stay on the macroscopically feasible subspace pointwise.  The flux
    stage is solved by conjugate gradient on the Schur complement of the
    KKT system.

    Returns (w, info); info carries the squared corrector norm, the flux
    field, iteration counts, and the constraint defect of the flux stage.
    """
    if not isinstance(u.grid, BoxDomain):
        raise ValueError("the macroscopic field lives on a box domain")
    if basis is None:
        basis = cell_problem_basis(A)
    d = basis.d
    if u.components != d:
        raise ValueError(f"need {d} components, got {u.components}")
    xgrid = u.grid
    hx = xgrid.volume / float(np.prod(xgrid.sizes))
    flux_op = _FluxConstraintOperator(xgrid, d, basis.operator.l, basis.conditions, hx)

    M = basis.gram
    M_uu, M_uq = M[:d, :d], M[:d, d:]
    M_qq = M[d:, d:]
    reg = 1e-12 * max(1.0, float(np.trace(M_qq)) / d)
    H = 2.0 * hx * M_qq + reg * np.eye(d)
    Hinv = np.linalg.inv(H)

    u_flat = u.data.reshape(-1, d)
    g = 2.0 * hx * (u_flat @ M_uq)  # gradient cross term, (nx, d)
    b = flux_op.rhs(u.data)

    def schur(mu: np.ndarray) -> np.ndarray:
        q = flux_op.rmatvec(mu).reshape(-1, d) @ Hinv
        return flux_op.matvec(q.ravel())

    rhs = -(b + flux_op.matvec((g @ Hinv).ravel()))
    if max_iter is None:
        max_iter = max(200, int(10 * np.sqrt(u_flat.size)))
    mu, res, iters = _schur_solve(schur, rhs, max_iter=max_iter)
    q_flat = (-(g + flux_op.rmatvec(mu).reshape(-1, d))) @ Hinv
    defect = float(np.linalg.norm(flux_op.matvec(q_flat.ravel()) - b))
    if defect > 10.0 * tol_proj:
        raise InfeasibleConstraint(
            f"flux-field constraint defect {defect:.3e} exceeds 10*tol_proj={10*tol_proj:.1e}"
        )

    z = np.concatenate([u_flat, q_flat], axis=1)  # (nx, 2d)
    norm_sq = float(np.einsum("xa,ab,xb->", z, M, z) * hx)
    w = None
    if materialize:
        fields = basis.fields.reshape(2 * d, -1)
        w_data = (z @ fields).reshape(tuple(xgrid.sizes) + tuple(A.ygrid.sizes) + (d,))
        w = TwoScaleField(xgrid, A.ygrid, w_data)
    info = {
        "norm_sq": norm_sq,
        "flux": GridField(xgrid, q_flat.reshape(tuple(xgrid.sizes) + (d,))),
        "cg_iterations": iters,
        "cg_residual": res,
        "flux_defect": defect,
        "conditions": basis.conditions.shape[0],
    }
    return w, info


# ---------------------------------------------------------------------------
# joint projection for a general starting corrector
# ---------------------------------------------------------------------------

class _JointConstraintOperator:
    """Constraint rows of the full two-scale system acting on the whole field w."""

    def __init__(self, A: CoefficientSet, xgrid: BoxDomain):
        self.cell = _CellConstraintOperator(A)
        self.xgrid = xgrid
        self.nx = xgrid.ndim
        self.nxpts = int(np.prod(xgrid.sizes))
        self.hx = xgrid.volume / float(self.nxpts)
        self.sqrt_hx = np.sqrt(self.hx)
        d, l = self.cell.d, self.cell.l
        self.d, self.l = d, l
        self.nypts = int(np.prod(A.ygrid.sizes))
        self.K = self.nxpts * self.nypts * d
        self.ncplx_y = self.nxpts * self.nypts * l
        self.flux = _FluxConstraintOperator(xgrid, d, l, np.zeros((0, 2 * d)), self.hx)
        self.rows = 2 * self.ncplx_y + self.nxpts * d + 2 * self.flux.ncplx
        self.shape = (self.rows, self.K)
        self.dtype = np.float64

    def _wshape(self):
        return tuple(self.xgrid.sizes) + tuple(self.cell.ygrid.sizes) + (self.d,)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        c = self.cell
        w = vec.reshape(self._wshape())
        P = np.einsum("...ilc,...c->...il",
                      np.broadcast_to(c.Ad, w.shape[:-1] + c.Ad.shape[-3:]), w)
        yaxes = tuple(range(self.nx, self.nx + c.ny))
        spec = sfft.fftn(P, axes=yaxes, workers=fft_workers()) / float(self.nypts)
        div = np.zeros(spec.shape[:-2] + (self.l,), dtype=np.complex128)
        kshape = (1,) * self.nx + tuple(c.ygrid.sizes) + (1,)
        for i in range(c.ny):
            div += 2j * np.pi * c.kappa[i].reshape(kshape) * spec[..., i, :]
        div = div * c.sqrt_weight.reshape(kshape) * self.sqrt_hx
        mean = w.mean(axis=yaxes) * self.sqrt_hx
        fluxbar = np.einsum("...rc,...c->...r",
                            np.broadcast_to(c.mats, w.shape[:-1] + c.mats.shape[-2:]), w).mean(axis=yaxes)
        xdiv = self.flux._div_coeffs(fluxbar)
        return np.concatenate([_pack_complex(div), mean.ravel(), _pack_complex(xdiv)])

    def rmatvec(self, vec: np.ndarray) -> np.ndarray:
        c = self.cell
        xsz = tuple(self.xgrid.sizes)
        ysz = tuple(c.ygrid.sizes)
        n1 = 2 * self.ncplx_y
        n2 = self.nxpts * self.d
        div_dual = _unpack_complex(vec[:n1], xsz + ysz + (self.l,))
        mean_dual = vec[n1:n1 + n2].reshape(xsz + (self.d,))
        xdiv_dual = vec[n1 + n2:]

        kshape = (1,) * self.nx + tuple(c.ygrid.sizes) + (1,)
        mu = div_dual * c.sqrt_weight.reshape(kshape) * self.sqrt_hx
        yaxes = tuple(range(self.nx, self.nx + c.ny))
        grad = np.zeros(xsz + ysz + (c.ny, self.l), dtype=np.complex128)
        for i in range(c.ny):
            grad[..., i, :] = -2j * np.pi * c.kappa[i].reshape(kshape) * mu
        grad_y = sfft.ifftn(grad, axes=yaxes, workers=fft_workers())
        out = np.einsum("...ilc,...il->...c",
                        np.broadcast_to(c.Ad, grad_y.shape[:-2] + c.Ad.shape[-3:]), grad_y).real

        out = out + mean_dual.reshape(xsz + (1,) * c.ny + (self.d,)) * self.sqrt_hx / float(self.nypts)

        qdual = self.flux.rmatvec(xdiv_dual).reshape(xsz + (self.d,))
        out = out + np.einsum("...rc,...r->...c",
                              np.broadcast_to(c.mats, xsz + ysz + c.mats.shape[-2:]),
                              np.broadcast_to(qdual.reshape(xsz + (1,) * c.ny + (self.d,)),
                                              xsz + ysz + (self.d,))) / float(self.nypts)
        return out.ravel()

    def rhs(self, u: GridField) -> np.ndarray:
        """Right-hand side so that L w = c expresses the system for (u, w)."""
        c = self.cell
        ubc = np.broadcast_to(
            u.data.reshape(tuple(self.xgrid.sizes) + (1,) * c.ny + (self.d,)), self._wshape()
        )
        vals = self.matvec(np.ascontiguousarray(ubc).ravel())
        # the cell mean of u is u itself, which is not constrained; only w is
        n1 = 2 * self.ncplx_y
        n2 = self.nxpts * self.d
        out = -vals
        out[n1:n1 + n2] = 0.0
        return out

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=self.matvec, rmatvec=self.rmatvec,
                              dtype=np.float64)


def affine_feasibility_project(
    w: TwoScaleField,
    u: GridField,
    A: CoefficientSet,
    tol_proj: float = DEFAULT_TOL_PROJ,
    max_iter: int | None = None,
) -> TwoScaleField:
    """Orthogonal L^2 projection of w onto the affine set of admissible
    correctors for the fixed macroscopic field u.

    A zero starting field is routed through the reduced minimum-norm engine;
    otherwise the combined constraint operator is inverted in the
    least-squares sense with LSQR, which yields the minimum-distance update.
    Raises InfeasibleConstraint when the residual floor exceeds 10*tol_proj.
    """
    if np.all(w.data == 0.0):
        out, _ = minimum_norm_corrector(u, A, tol_proj=tol_proj, max_iter=max_iter)
        return out
    joint = _JointConstraintOperator(A, w.xgrid)
    if max_iter is None:
        max_iter = max(500, int(10 * np.sqrt(joint.K)))
    target = joint.rhs(u) - joint.matvec(w.data.ravel())
    sol = lsqr(joint.as_linear_operator(), target, atol=1e-12, btol=1e-12,
               iter_lim=max_iter)
    delta, istop, r1norm = sol[0], sol[1], sol[3]
    if r1norm > 10.0 * tol_proj * max(1.0, np.linalg.norm(target)):
        raise InfeasibleConstraint(
            f"constraint residual floor {r1norm:.3e} after LSQR (istop={istop})"
        )
    return TwoScaleField(w.xgrid, w.ygrid, w.data + delta.reshape(w.data.shape))
