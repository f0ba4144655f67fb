"""qdtn: Dirichlet-to-Neumann data synthesis and coefficient reconstruction
for quasilinear divergence-form conductivity equations."""

from .grid_core import (
    Ball,
    BoundaryTrace,
    BoxDomain,
    ComplexScalarField,
    FrequencyGrid,
    Grid,
    ScalarField,
    VectorField,
    boundary_integral,
    boundary_restrict,
    divergence,
    fourier_forward,
    fourier_inverse,
    gradient,
    make_frequency_grid,
)

__version__ = "0.1.0"
