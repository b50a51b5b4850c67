"""Coefficient matrices A^i(y), operator assembly, profiles, and mollification.

A coefficient set stores the N matrices A^i(y) in M^{l x d} sampled on a
periodic cell grid, together with a dilation factor n.  Dilations act by
strided index re-mapping modulo the grid (n must divide each grid size), so
cell means and mean squares of the dilated samples match the originals
exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from .grids import GridField, PeriodicGrid, fft_workers

__all__ = [
    "EllipticityViolation",
    "CoefficientSet",
    "AssembledOperator",
    "assemble",
    "make_profile",
    "mollify",
    "layered_coefficients",
    "identity_coefficients",
    "checkerboard_coefficients",
    "dilate_samples",
]


class EllipticityViolation(Exception):
    """The assembled operator fails the uniform ellipticity bound."""


def dilate_samples(arr: np.ndarray, n: int, naxes: int) -> np.ndarray:
    """Strided periodic re-map arr[(n*i) mod M] along the first naxes axes."""
    if n == 1:
        return arr
    out = arr
    for ax in range(naxes):
        m = arr.shape[ax]
        if m % n != 0:
            raise ValueError(f"dilation {n} does not divide grid size {m}")
        idx = (n * np.arange(m)) % m
        out = np.take(out, idx, axis=ax)
    return out


@dataclass
class CoefficientSet:
    """Sampled matrices A^i(y), i = 1..N, with shape (*sizes, N, l, d)."""

    ygrid: PeriodicGrid
    samples: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        nd = self.ygrid.ndim
        if self.samples.ndim != nd + 3:
            raise ValueError("samples must have shape (*sizes, N, l, d)")
        if self.samples.shape[:nd] != tuple(self.ygrid.sizes):
            raise ValueError("sample grid does not match ygrid")
        n_mats, l, d = self.samples.shape[nd:]
        if n_mats != nd:
            raise ValueError(f"need one matrix per axis, got {n_mats} for N={nd}")
        if l * nd != d:
            raise ValueError(f"operator assembly requires l*N = d, got l={l}, N={nd}, d={d}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("coefficient samples must be finite")
        if self.dilation < 1:
            raise ValueError("dilation must be a positive integer")

    @property
    def N(self) -> int:
        return self.ygrid.ndim

    @property
    def l(self) -> int:
        return self.samples.shape[self.ygrid.ndim + 1]

    @property
    def d(self) -> int:
        return self.samples.shape[self.ygrid.ndim + 2]

    def dilated(self) -> np.ndarray:
        """Samples of A^i at the dilated argument, (*sizes, N, l, d)."""
        return dilate_samples(self.samples, self.dilation, self.ygrid.ndim)

    def with_dilation(self, n: int) -> "CoefficientSet":
        return CoefficientSet(self.ygrid, self.samples, n)


@dataclass
class AssembledOperator:
    """Nodewise d x d matrices stacking the rows (A^i xi)^T, with gamma."""

    ygrid: PeriodicGrid
    matrices: np.ndarray  # (*sizes, d, d)
    gamma: float

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrices)


def assemble(A: CoefficientSet, dilated: bool = True) -> AssembledOperator:
    """Stack the A^i rows into the nodewise operator and verify ellipticity.

    gamma is the minimum over nodes of the smallest eigenvalue of the
    symmetric part; a nonpositive value raises EllipticityViolation.
    """
    samples = A.dilated() if dilated else A.samples
    nd = A.ygrid.ndim
    # (..., N, l, d) -> (..., N*l, d) with row blocks ordered by i
    mats = samples.reshape(samples.shape[:nd] + (A.d, A.d))
    sym = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    gamma = float(np.min(np.linalg.eigvalsh(sym)))
    if gamma <= 0.0:
        raise EllipticityViolation(f"minimum symmetric eigenvalue {gamma:.3e} is not positive")
    return AssembledOperator(A.ygrid, mats, gamma)


def make_profile(raw: np.ndarray) -> np.ndarray:
    """Normalize 1-D samples to zero mean and unit mean square on the period.

    Rejects constant input and profiles whose normalized minimum does not
    stay above -1 (the layered operator would lose ellipticity).
    """
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size < 2:
        raise ValueError("profile needs at least two samples")
    v = raw - raw.mean()
    ms = float(np.mean(v**2))
    if ms <= 0.0:
        raise ValueError("constant profile has zero variance")
    a = v / np.sqrt(ms)
    if float(a.min()) <= -1.0 + 1e-9:
        raise ValueError(f"normalized profile minimum {a.min():.6f} violates a > -1")
    return a


def layered_coefficients(profile: np.ndarray, ygrid: PeriodicGrid, dilation: int = 1) -> CoefficientSet:
    """Two-dimensional layered operator A^1 = (1 + a(y2), 0), A^2 = (0, 1).

    The profile is indexed along the second cell axis; its length must match
    that grid size.
    """
    if ygrid.ndim != 2:
        raise ValueError("layered coefficients are two-dimensional")
    a = np.asarray(profile, dtype=np.float64).ravel()
    if a.size != ygrid.sizes[1]:
        raise ValueError("profile length must match the second grid axis")
    samples = np.zeros(tuple(ygrid.sizes) + (2, 1, 2))
    samples[..., 0, 0, 0] = 1.0 + a[None, :]
    samples[..., 1, 0, 1] = 1.0
    return CoefficientSet(ygrid, samples, dilation)


def identity_coefficients(ygrid: PeriodicGrid, dilation: int = 1) -> CoefficientSet:
    """Constant rows-of-identity operator: A^i = e_i^T blocks, l = 1."""
    nd = ygrid.ndim
    samples = np.zeros(tuple(ygrid.sizes) + (nd, 1, nd))
    for i in range(nd):
        samples[..., i, 0, i] = 1.0
    return CoefficientSet(ygrid, samples, dilation)


def checkerboard_coefficients(ygrid: PeriodicGrid, lo: float = 1.0, hi: float = 2.0) -> CoefficientSet:
    """Rows-of-identity operator scaled by a two-phase checkerboard."""
    base = identity_coefficients(ygrid)
    mesh = ygrid.mesh()
    phase = np.zeros(ygrid.sizes, dtype=int)
    for ax in mesh:
        phase += (ax >= 0).astype(int)
    scale = np.where(phase % 2 == 0, lo, hi)
    samples = base.samples * scale[..., None, None, None]
    return CoefficientSet(ygrid, samples, 1)


def _bump_kernel(ygrid: PeriodicGrid, k: int) -> np.ndarray:
    """Tensorized smooth bump of radius 1/k, discretely normalized to unit mass.

    Sampled at index offsets m*h (node differences), so the cyclic convolution
    is centered: ker[m] = ker[M-m].
    """
    ker = np.ones(ygrid.sizes)
    for ax in range(ygrid.ndim):
        m = ygrid.sizes[ax]
        offs = np.arange(m) / m
        dist = np.minimum(offs, 1.0 - offs)
        t = dist * k
        prof = np.zeros(m)
        inside = t < 1.0
        prof[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
        shape = [1] * ygrid.ndim
        shape[ax] = m
        ker = ker * prof.reshape(shape)
    total = ker.sum()
    if total <= 0.0:
        raise ValueError(f"mollifier radius 1/{k} is below the grid resolution")
    return ker / total


def mollify(A: CoefficientSet, k: int) -> CoefficientSet:
    """Periodic convolution of every entry with a smooth bump of radius 1/k.

    The kernel is nonnegative with unit discrete mass, so constants are
    preserved exactly and nodewise magnitudes never grow.
    """
    if k < 1:
        raise ValueError("mollification index must be a positive integer")
    nd = A.ygrid.ndim
    ker = _bump_kernel(A.ygrid, k)
    axes = tuple(range(nd))
    ker_hat = sfft.rfftn(ker, axes=axes, workers=fft_workers())
    sample_hat = sfft.rfftn(A.samples, axes=axes, workers=fft_workers())
    smoothed = sfft.irfftn(
        sample_hat * ker_hat.reshape(ker_hat.shape + (1, 1, 1)),
        axes=axes,
        s=A.ygrid.sizes,
        workers=fft_workers(),
    )
    return CoefficientSet(A.ygrid, smoothed, A.dilation)
