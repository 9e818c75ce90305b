"""Direct and inverse scattering for the half-line matrix Schrödinger operator."""

from .core import (
    BoundaryCondition,
    GridSpec,
    HermitianPotential,
    ScatteringError,
    boundary_pair,
    nullspace_projector,
    psd_inv_sqrt,
)
from .direct import ScatteringDataset, scattering_dataset

__version__ = "0.1.0"
