"""Fourier projection of periodic vector fields onto divergence-free fields.

The projector acts per frequency through P(lambda) = I - lambda lambda^T/|lambda|^2,
the orthogonal projection onto the kernel of the divergence symbol, and drops
the mean mode.  It is exact on the grid: outputs have identically vanishing
spectral divergence and zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .grids import (
    BoxDomain,
    GridField,
    PeriodicGrid,
    TwoScaleField,
    derivative_frequencies,
    fft_workers,
)

__all__ = [
    "SpectralProjector",
    "divfree_project",
    "divfree_project_y",
    "helmholtz_split",
    "spectral_divergence_max",
]


def _frequency_vectors(grid) -> np.ndarray:
    """Frequency mesh kappa in the derivative gauge, shape (N, *sizes).

    Integer wave vectors on the unit cell, lambda_j / L_j on a box treated as
    a torus of period L_j.  Nyquist components are zeroed so that the
    frequency-dependent projection matrices stay even in kappa and real
    fields map to real fields; modes whose gauge frequency vanishes entirely
    (the mean and pure-Nyquist modes) are dropped by the projector.
    """
    return np.array(np.meshgrid(*derivative_frequencies(grid), indexing="ij"))


@dataclass(frozen=True)
class SpectralProjector:
    """Per-frequency projection matrices onto the divergence kernel."""

    grid: PeriodicGrid | BoxDomain

    def matrix(self, lam) -> np.ndarray:
        """P(lambda) = I - lambda lambda^T / |lambda|^2 for lambda != 0."""
        lam = np.asarray(lam, dtype=np.float64)
        n2 = float(lam @ lam)
        if n2 == 0.0:
            raise ValueError("projection matrix is defined for lambda != 0")
        return np.eye(lam.size) - np.outer(lam, lam) / n2

    def apply_spectrum(self, spec: np.ndarray) -> np.ndarray:
        """Apply P(lambda) frequency-wise; the mean mode is zeroed."""
        kappa = _frequency_vectors(self.grid)
        k2 = np.sum(kappa**2, axis=0)
        safe = np.where(k2 > 0, k2, 1.0)
        # (kappa . spec) kappa / |kappa|^2, with components in the last axis
        dot = np.einsum("j...,...j->...", kappa, spec)
        out = spec - (dot / safe)[..., None] * np.moveaxis(kappa, 0, -1)
        out[k2 == 0] = 0.0
        return out


def divfree_project(R: GridField) -> GridField:
    """Project a vector field with N components onto divergence-free fields.

    Constants map to zero, divergence-free zero-mean fields are fixed points,
    and pure gradients annihilate.
    """
    nd = len(R.grid.sizes)
    if R.components != nd:
        raise ValueError(f"need {nd} components on a {nd}-d grid, got {R.components}")
    axes = tuple(range(nd))
    spec = sfft.fftn(R.data, axes=axes, workers=fft_workers())
    spec = SpectralProjector(R.grid).apply_spectrum(spec)
    out = sfft.ifftn(spec, axes=axes, workers=fft_workers()).real
    return GridField(R.grid, np.ascontiguousarray(out))


def divfree_project_y(w: TwoScaleField) -> TwoScaleField:
    """Apply the projector to every x-slice in the cell variable."""
    nd = len(w.ygrid.sizes)
    if w.components != nd:
        raise ValueError(f"need {nd} components on a {nd}-d cell grid, got {w.components}")
    spec = sfft.fftn(w.data, axes=w.yaxes, workers=fft_workers())
    kappa = _frequency_vectors(w.ygrid)
    k2 = np.sum(kappa**2, axis=0)
    safe = np.where(k2 > 0, k2, 1.0)
    dot = np.einsum("j...,...j->...", kappa, spec)
    out = spec - (dot / safe)[..., None] * np.moveaxis(kappa, 0, -1)
    out[..., k2 == 0, :] = 0.0
    vals = sfft.ifftn(out, axes=w.yaxes, workers=fft_workers()).real
    return TwoScaleField(w.xgrid, w.ygrid, np.ascontiguousarray(vals))


def helmholtz_split(R: GridField) -> tuple[GridField, GridField]:
    """Decompose R - mean(R) = divfree + grad(potential); returns both parts.

    The potential is the scalar field phi with hat(phi) = kappa.hat(R) /
    (2 pi i |kappa|^2); its gradient is the orthogonal complement of the
    projection.
    """
    nd = len(R.grid.sizes)
    axes = tuple(range(nd))
    spec = sfft.fftn(R.data, axes=axes, workers=fft_workers())
    kappa = _frequency_vectors(R.grid)
    k2 = np.sum(kappa**2, axis=0)
    safe = np.where(k2 > 0, k2, 1.0)
    dot = np.einsum("j...,...j->...", kappa, spec)
    phi_hat = dot / (2j * np.pi * safe)
    phi_hat[k2 == 0] = 0.0
    phi = sfft.ifftn(phi_hat, axes=axes, workers=fft_workers()).real
    df = divfree_project(GridField(R.grid, R.data - R.data.mean(axis=axes)))
    return df, GridField(R.grid, np.ascontiguousarray(phi))


def spectral_divergence_max(R: GridField) -> float:
    """Max over frequencies of |kappa . hat(R)|; the projector's exactness gauge."""
    nd = len(R.grid.sizes)
    axes = tuple(range(nd))
    spec = sfft.fftn(R.data, axes=axes, workers=fft_workers()) / float(np.prod(R.grid.sizes))
    kappa = _frequency_vectors(R.grid)
    dot = np.einsum("j...,...j->...", kappa, spec)
    return float(np.max(np.abs(dot)))
