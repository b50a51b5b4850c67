"""Grids, sampled fields, quadrature, spectral transforms and dual norms.

Two grid families are supported: the periodic unit cell Q = (-1/2, 1/2)^N
with cell-centered nodes, and axis-aligned boxes with the same cell-centered
sampling.  All norms are midpoint-quadrature norms; negative-order norms are
realized spectrally (Fourier weights on the torus, a Dirichlet sine expansion
on boxes).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

__all__ = [
    "PeriodicGrid",
    "BoxDomain",
    "GridField",
    "TwoScaleField",
    "NormReport",
    "integrate",
    "lp_norm",
    "spectral_forward",
    "spectral_inverse",
    "hminus1_periodic_norm",
    "hminus1_dirichlet_norm",
    "sine_coefficients",
    "sine_synthesis",
    "dirichlet_eigenvalues",
    "box_torus_divergence",
    "divergence_residual_norm",
    "derivative_frequencies",
    "integer_frequency_mesh",
    "fft_workers",
]


def fft_workers() -> int:
    """Worker count for the FFT backend, capped by HOMOGLAB_THREADS."""
    cap = os.environ.get("HOMOGLAB_THREADS")
    n = os.cpu_count() or 1
    if cap is not None:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return min(n, 8)


@dataclass(frozen=True)
class PeriodicGrid:
    """Cell-centered grid on the unit cell Q = (-1/2, 1/2)^N.

    Nodes along axis j sit at -1/2 + (i + 1/2)/M_j.  Sizes must be even so
    that Nyquist modes are unambiguous and real fields stay real under the
    symmetric spectral operations used throughout.
    """

    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        if len(self.sizes) == 0:
            raise ValueError("grid needs at least one axis")
        for m in self.sizes:
            if m < 2 or m % 2 != 0:
                raise ValueError(f"periodic grid sizes must be even and >= 2, got {m}")

    @property
    def ndim(self) -> int:
        return len(self.sizes)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(1.0 / m for m in self.sizes)

    @property
    def volume(self) -> float:
        return 1.0

    def nodes(self, axis: int) -> np.ndarray:
        m = self.sizes[axis]
        return -0.5 + (np.arange(m) + 0.5) / m

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.nodes(j) for j in range(self.ndim)], indexing="ij")


@dataclass(frozen=True)
class BoxDomain:
    """Cell-centered grid on an axis-aligned box (lo_j, hi_j)."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    sizes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        if not (len(self.lo) == len(self.hi) == len(self.sizes)):
            raise ValueError("lo, hi and sizes must have equal length")
        for a, b in zip(self.lo, self.hi):
            if not b > a:
                raise ValueError("box side lengths must be positive")
        for m in self.sizes:
            if m < 2:
                raise ValueError("box grids need at least 2 nodes per axis")

    @classmethod
    def unit(cls, sizes) -> "BoxDomain":
        n = len(sizes)
        return cls((0.0,) * n, (1.0,) * n, tuple(sizes))

    @property
    def ndim(self) -> int:
        return len(self.sizes)

    @property
    def lengths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(ln / m for ln, m in zip(self.lengths, self.sizes))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def nodes(self, axis: int) -> np.ndarray:
        m = self.sizes[axis]
        return self.lo[axis] + (np.arange(m) + 0.5) * self.spacing[axis]

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.nodes(j) for j in range(self.ndim)], indexing="ij")


Grid = PeriodicGrid | BoxDomain


def _cell_measure(grid: Grid) -> float:
    return grid.volume / float(np.prod(grid.sizes))


@dataclass
class GridField:
    """d-component real field sampled on a grid; data shape (*sizes, d)."""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == len(self.grid.sizes):
            self.data = self.data[..., None]
        expect = tuple(self.grid.sizes)
        if self.data.shape[:-1] != expect:
            raise ValueError(f"data shape {self.data.shape} does not match grid {expect}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite samples")

    @property
    def components(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def zeros(cls, grid: Grid, components: int) -> "GridField":
        return cls(grid, np.zeros(tuple(grid.sizes) + (components,)))

    @classmethod
    def constant(cls, grid: Grid, value) -> "GridField":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        data = np.broadcast_to(value, tuple(grid.sizes) + value.shape).copy()
        return cls(grid, data)

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "GridField":
        """Sample fn(*coords) -> (..., d) or (...) at the grid nodes."""
        vals = np.asarray(fn(*grid.mesh()), dtype=np.float64)
        if vals.shape == tuple(grid.sizes):
            vals = vals[..., None]
        return cls(grid, vals)

    def copy(self) -> "GridField":
        return GridField(self.grid, self.data.copy())


@dataclass
class TwoScaleField:
    """Field w(x, y) on a box grid times a periodic cell grid.

    Data shape is (*xsizes, *ysizes, d).  `zero_y_mean` asserts that the
    per-x cell average vanishes within `tol_mean`.
    """

    xgrid: BoxDomain
    ygrid: PeriodicGrid
    data: np.ndarray
    zero_y_mean: bool = False
    tol_mean: float = 1e-10

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        expect = tuple(self.xgrid.sizes) + tuple(self.ygrid.sizes)
        if self.data.ndim == len(expect):
            self.data = self.data[..., None]
        if self.data.shape[:-1] != expect:
            raise ValueError(f"data shape {self.data.shape} does not match grids {expect}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("field contains non-finite samples")
        if self.zero_y_mean:
            worst = np.max(np.abs(self.y_mean().data))
            if worst > self.tol_mean:
                raise ValueError(f"cell mean {worst:.3e} exceeds tol_mean {self.tol_mean:.1e}")

    @property
    def components(self) -> int:
        return self.data.shape[-1]

    @property
    def yaxes(self) -> tuple[int, ...]:
        nx = len(self.xgrid.sizes)
        return tuple(range(nx, nx + len(self.ygrid.sizes)))

    @classmethod
    def zeros(cls, xgrid: BoxDomain, ygrid: PeriodicGrid, components: int) -> "TwoScaleField":
        shape = tuple(xgrid.sizes) + tuple(ygrid.sizes) + (components,)
        return cls(xgrid, ygrid, np.zeros(shape))

    def y_mean(self) -> GridField:
        """Cell average per macroscopic node, as a field on the x-grid."""
        return GridField(self.xgrid, self.data.mean(axis=self.yaxes))

    def l2_norm(self) -> float:
        w = _cell_measure(self.xgrid) / float(np.prod(self.ygrid.sizes))
        return float(np.sqrt(np.sum(self.data**2) * w))

    def copy(self) -> "TwoScaleField":
        return TwoScaleField(self.xgrid, self.ygrid, self.data.copy())


@dataclass
class NormReport:
    """Value of a norm evaluation together with its kind and exponent."""

    kind: str  # "Lp" | "Hminus1_periodic" | "Hminus1_dirichlet"
    exponent: float
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError("norms are nonnegative")


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def integrate(f: GridField) -> np.ndarray:
    """Midpoint quadrature of f over its domain, componentwise."""
    axes = tuple(range(len(f.grid.sizes)))
    return f.data.mean(axis=axes) * f.grid.volume


def lp_norm(f: GridField, p: float) -> float:
    """Discrete L^p norm of |f| (pointwise Euclidean magnitude)."""
    if p < 1 or not np.isfinite(p):
        raise ValueError(f"exponent must satisfy 1 <= p < inf, got {p}")
    mag2 = np.sum(f.data**2, axis=-1)
    if p == 2:
        return float(np.sqrt(mag2.mean() * f.grid.volume))
    return float((np.power(mag2, p / 2).mean() * f.grid.volume) ** (1.0 / p))


# ---------------------------------------------------------------------------
# periodic spectral transforms
# ---------------------------------------------------------------------------

def integer_frequency_mesh(sizes) -> np.ndarray:
    """Integer frequency vectors, shape (N, *sizes), fftfreq layout."""
    axes = [np.rint(sfft.fftfreq(m) * m).astype(np.int64) for m in sizes]
    return np.array(np.meshgrid(*axes, indexing="ij"))


def _node_phase(grid: PeriodicGrid, sign: float) -> list[np.ndarray]:
    """Per-axis factors exp(sign * 2 pi i lambda y0) anchoring coefficients
    to the cell-centered node positions (the FFT indexes samples from 0)."""
    out = []
    for m in grid.sizes:
        lam = np.rint(sfft.fftfreq(m) * m)
        y0 = -0.5 + 0.5 / m
        out.append(np.exp(sign * 2j * np.pi * lam * y0))
    return out


def spectral_forward(f: GridField) -> np.ndarray:
    """Normalized DFT of a periodic field: coefficients indexed by lambda.

    The zero mode carries the cell average; conventions are such that
    f(y) = sum_lambda coeff(lambda) exp(2*pi*i y.lambda) at the nodes.
    """
    if not isinstance(f.grid, PeriodicGrid):
        raise ValueError("spectral_forward needs a periodic grid")
    axes = tuple(range(len(f.grid.sizes)))
    scale = 1.0 / float(np.prod(f.grid.sizes))
    spec = sfft.fftn(f.data, axes=axes, workers=fft_workers()) * scale
    for ax, phase in enumerate(_node_phase(f.grid, -1.0)):
        shape = [1] * spec.ndim
        shape[ax] = phase.size
        spec = spec * phase.reshape(shape)
    return spec


def spectral_inverse(spectrum: np.ndarray, grid: PeriodicGrid) -> GridField:
    """Inverse of spectral_forward; returns the real part."""
    axes = tuple(range(len(grid.sizes)))
    spec = np.array(spectrum, dtype=np.complex128, copy=True)
    for ax, phase in enumerate(_node_phase(grid, 1.0)):
        shape = [1] * spec.ndim
        shape[ax] = phase.size
        spec = spec * phase.reshape(shape)
    scale = float(np.prod(grid.sizes))
    vals = sfft.ifftn(spec * scale, axes=axes, workers=fft_workers())
    return GridField(grid, np.ascontiguousarray(vals.real))


def hminus1_periodic_norm(g: GridField) -> float:
    """Dual Sobolev norm on the torus: Fourier weight 1/(4 pi^2 |lambda|^2).

    The mean mode is carried at weight 1, so the value vanishes iff g == 0.
    """
    if not isinstance(g.grid, PeriodicGrid):
        raise ValueError("hminus1_periodic_norm needs a periodic grid")
    spec = spectral_forward(g)
    lam = integer_frequency_mesh(g.grid.sizes)
    lam2 = np.sum(lam.astype(np.float64) ** 2, axis=0)
    weight = np.empty_like(lam2)
    nz = lam2 > 0
    weight[nz] = 1.0 / (4.0 * np.pi**2 * lam2[nz])
    weight[~nz] = 1.0
    return float(np.sqrt(np.sum(np.abs(spec) ** 2 * weight[..., None])))


# ---------------------------------------------------------------------------
# Dirichlet sine machinery on boxes
# ---------------------------------------------------------------------------
#
# Basis per axis: e_k(x) = sin(pi k (x - lo)/L), k = 1..M, normalized so the
# sampled vectors are orthonormal under midpoint quadrature.  For k < M the
# discrete normalization agrees exactly with the continuum L^2 one; the k = M
# mode differs by sqrt(2) (a discrete-only boundary mode).


def _axis_sine_norm(m: int, h: float) -> np.ndarray:
    w = np.full(m, np.sqrt(h * m / 2.0))
    w[-1] = np.sqrt(h * m)  # k = M mode has squared sample sum M, not M/2
    return w


def sine_coefficients(f: GridField) -> np.ndarray:
    """Coefficients of f in the discretely orthonormal sine basis.

    Output shape (*sizes, d); axis index i corresponds to mode k = i + 1.
    """
    if not isinstance(f.grid, BoxDomain):
        raise ValueError("sine_coefficients needs a box domain")
    grid = f.grid
    out = f.data
    for ax, (m, h) in enumerate(zip(grid.sizes, grid.spacing)):
        out = sfft.dst(out, type=2, axis=ax, norm=None, workers=fft_workers()) / 2.0
        shape = [1] * out.ndim
        shape[ax] = m
        out = out * (h / _axis_sine_norm(m, h)).reshape(shape)
    return out


def sine_synthesis(coeffs: np.ndarray, grid: BoxDomain) -> GridField:
    """Inverse of sine_coefficients."""
    out = np.asarray(coeffs, dtype=np.float64)
    for ax, (m, h) in enumerate(zip(grid.sizes, grid.spacing)):
        shape = [1] * out.ndim
        shape[ax] = m
        amp = out / _axis_sine_norm(m, h).reshape(shape)
        # DST-III synthesizes 2*sum_{k<M-1} v_k sin(...) + (-1)^n v_{M-1}
        half = np.full(m, 0.5)
        half[-1] = 1.0
        out = sfft.dst(amp * half.reshape(shape), type=3, axis=ax, norm=None,
                       workers=fft_workers())
    return GridField(grid, out)


def dirichlet_eigenvalues(grid: BoxDomain) -> np.ndarray:
    """-Laplace eigenvalues pi^2 sum (k_j/L_j)^2 on the sine modes."""
    axes = []
    for m, ln in zip(grid.sizes, grid.lengths):
        k = np.arange(1, m + 1, dtype=np.float64)
        axes.append((np.pi * k / ln) ** 2)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.sum(mesh, axis=0)


def hminus1_dirichlet_norm(g: GridField) -> float:
    """Dual norm via the zero-boundary Poisson solve: ||grad psi||_2, Lap psi = g."""
    coeffs = sine_coefficients(g)
    lam = dirichlet_eigenvalues(g.grid)
    return float(np.sqrt(np.sum(coeffs**2 / lam[..., None])))


def derivative_frequencies(grid: Grid) -> list[np.ndarray]:
    """Per-axis continuous frequencies kappa_j with Nyquist zeroed.

    Derivative multipliers are 2 pi i kappa_j; zeroing the Nyquist mode keeps
    real fields real and avoids the asymmetric Nyquist derivative.
    """
    lengths = grid.lengths if isinstance(grid, BoxDomain) else (1.0,) * grid.ndim
    out = []
    for m, ln in zip(grid.sizes, lengths):
        kap = np.rint(sfft.fftfreq(m) * m) / ln
        if m % 2 == 0:
            kap[m // 2] = 0.0
        out.append(kap)
    return out


def box_torus_divergence(F: np.ndarray, grid: Grid) -> np.ndarray:
    """Spectral divergence contracting the axis of length N after the grid axes.

    The grid is treated as a torus (box side lengths as periods); this is the
    discrete divergence used by every constraint residual.  It annihilates
    exactly the constant fields, the curl-type trigonometric fields, and the
    outputs of the divergence-free projector.
    """
    nd = len(grid.sizes)
    if F.shape[nd] != nd:
        raise ValueError("divergence axis must have length N")
    axes = tuple(range(nd))
    spec = sfft.fftn(F, axes=axes, workers=fft_workers())
    kaps = derivative_frequencies(grid)
    div = np.zeros(spec.shape[:nd] + spec.shape[nd + 1:], dtype=np.complex128)
    for j in range(nd):
        shape = [1] * div.ndim
        shape[j] = grid.sizes[j]
        div += 2j * np.pi * kaps[j].reshape(shape) * np.take(spec, j, axis=nd)
    return sfft.ifftn(div, axes=axes, workers=fft_workers()).real


def divergence_residual_norm(F: np.ndarray, grid: BoxDomain) -> float:
    """H^-1 Dirichlet norm of the spectral divergence of a flux field."""
    div = box_torus_divergence(F, grid)
    return hminus1_dirichlet_norm(GridField(grid, div.reshape(div.shape[:len(grid.sizes)] + (-1,))))
