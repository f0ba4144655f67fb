"""Synthetic ground-truth coefficient sets and test data generators.

All preset coefficients are cap-shaped polynomial bumps (1 - (r/R)^2)^k,
whose potentials stay reasonably band limited at desk-scale frequency
cutoffs, with supports inside 0.7 of the domain radius.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import CoefficientSet, RemainderSpec
from .grid_core import Ball, BoundaryTrace, Grid, ScalarField, VectorField

PRESETS = ("flat", "bump_gamma", "bump_b", "combined", "with_remainder")


def cap_bump(grid: Grid, center, radius: float, power: int = 3) -> np.ndarray:
    """Compactly supported bump (1 - |x-c|^2/R^2)_+^power."""
    X = grid.mesh
    c = np.asarray(center, float)
    d2 = sum((X[a] - c[a]) ** 2 for a in range(3))
    return np.clip(1.0 - d2 / radius ** 2, 0.0, None) ** power


def _check_support(grid: Grid, center, radius, frac=0.7):
    if not isinstance(grid.domain, Ball):
        return
    rho = grid.domain.radius
    dist = np.linalg.norm(np.asarray(center, float) - grid.domain.center)
    if dist + radius > frac * rho + 1e-12:
        raise ValueError(
            f"bump at {center} with radius {radius} leaves {frac} of the domain")


@dataclass(frozen=True)
class Phantom:
    name: str
    coeffs: CoefficientSet
    b_scale: float

    @property
    def grid(self) -> Grid:
        return self.coeffs.grid


def make_phantom(grid: Grid, preset: str, *, gamma_contrast: float = 0.1,
                 b_scale: float = 0.5, remainder_scale: float = 0.4,
                 gradient_ball: float = 0.8) -> Phantom:
    """Named preset coefficient sets.

    flat: gamma = 1, b = 0.  bump_gamma: a single conductivity bump.
    bump_b: gamma = 1 with three quadratic-coefficient bumps.  combined:
    both.  with_remainder: combined plus a cubic saturation remainder.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    one = np.ones(grid.dims)
    zero3 = np.zeros(grid.dims + (3,))
    gamma_vals = one.copy()
    b_vals = zero3.copy()
    remainder = RemainderSpec(h=gradient_ball)

    if preset in ("bump_gamma", "combined", "with_remainder"):
        spec = ((0.05, 0.0, 0.0), 0.64)
        _check_support(grid, *spec)
        gamma_vals = 1.0 + gamma_contrast * cap_bump(grid, *spec)
    if preset in ("bump_b", "combined", "with_remainder"):
        specs = [((0.0, 0.0, 0.0), 0.70), ((0.04, 0.0, 0.0), 0.64),
                 ((0.0, 0.03, -0.03), 0.63)]
        amps = (1.0, 0.7, 0.5)
        for s in specs:
            _check_support(grid, *s)
        b_vals = np.stack([b_scale * a * cap_bump(grid, *s)
                           for a, s in zip(amps, specs)], axis=-1)
    if preset == "with_remainder":
        spec = ((0.0, -0.04, 0.0), 0.6)
        _check_support(grid, *spec)
        c = ScalarField(grid, remainder_scale * cap_bump(grid, *spec))
        remainder = RemainderSpec("cubic_saturation", c, h=gradient_ball)

    coeffs = CoefficientSet(ScalarField(grid, gamma_vals), VectorField(grid, b_vals),
                            remainder)
    return Phantom(name=preset, coeffs=coeffs, b_scale=b_scale)


def wide_gamma_phantom(grid: Grid, contrast: float = 0.1, radius: float = 0.95,
                       power: int = 3) -> Phantom:
    """Conductivity phantom filling most of the domain; its potential is
    close to band limited at desk-scale cutoffs (used by the potential
    recovery checks, where narrow presets are cutoff dominated)."""
    gamma_vals = 1.0 + contrast * cap_bump(grid, (0.0, 0.0, 0.0), radius, power)
    coeffs = CoefficientSet(ScalarField(grid, gamma_vals),
                            VectorField(grid, np.zeros(grid.dims + (3,))),
                            RemainderSpec(h=0.8))
    return Phantom(name="wide_gamma", coeffs=coeffs, b_scale=0.0)


def random_smooth_trace(grid: Grid, rng: np.random.Generator,
                        scale: float = 1.0, degree: int = 2) -> BoundaryTrace:
    """Random low-order polynomial-and-wave boundary data."""
    p = grid.boundary.coords
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    c = rng.normal(size=10)
    vals = (c[0] * x + c[1] * y + c[2] * z
            + c[3] * x * y + c[4] * y * z + c[5] * x * z
            + c[6] * (x * x - z * z)
            + 0.5 * c[7] * np.sin(1.3 * x + 0.4)
            + 0.5 * c[8] * np.cos(1.1 * y - 0.2)
            + 0.5 * c[9] * np.sin(0.9 * z))
    nrm = np.max(np.abs(vals))
    return BoundaryTrace(grid, scale * vals / max(nrm, 1e-300))
