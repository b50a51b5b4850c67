"""Spectral toolkit for divergence-constrained periodic homogenization."""

from .grids import (
    BoxDomain,
    GridField,
    NormReport,
    PeriodicGrid,
    TwoScaleField,
    hminus1_dirichlet_norm,
    hminus1_periodic_norm,
    integrate,
    lp_norm,
    spectral_forward,
    spectral_inverse,
)
from .projector import SpectralProjector, divfree_project, divfree_project_y, helmholtz_split

__version__ = "0.1.0"
