"""Extraction of the first- and second-order boundary responses from
evaluations of the nonlinear DN map at several data amplitudes.

The map is probed at +/- eps for every scheduled amplitude, which splits the
response into an odd part eps*g1 + eps^3*g3 + ... and an even part
eps^2*g2 + eps^4*g4 + ...; each parity is fitted by least squares with one
nuisance order.  The split keeps the design matrices tiny and well
conditioned and removes the leading truncation term of a one-sided fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IllConditionedFit
from .forward import DtNOperator, dn_apply
from .grid_core import BoundaryTrace


@dataclass(frozen=True)
class EpsilonSchedule:
    """Strictly decreasing positive amplitudes, all in the smallness regime."""

    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 3:
            raise ValueError("need at least three amplitudes")
        if any(v <= 0 for v in vals):
            raise ValueError("amplitudes must be positive")
        if any(a <= b for a, b in zip(vals, vals[1:])):
            raise ValueError("amplitudes must be strictly decreasing")
        if vals[0] / vals[-1] > 1e3:
            raise ValueError("amplitude ratio above 1e3 makes the fit ill conditioned")
        object.__setattr__(self, "values", vals)

    def scaled(self, factor: float) -> "EpsilonSchedule":
        return EpsilonSchedule(tuple(v * factor for v in self.values))


DEFAULT_SCHEDULE = EpsilonSchedule((0.02, 0.014, 0.01, 0.007, 0.005))


@dataclass(frozen=True)
class LinearizedData:
    f: BoundaryTrace
    g1: BoundaryTrace
    g2: BoundaryTrace
    fit_residual: float


def _parity_fit(eps: np.ndarray, rows: np.ndarray, powers: tuple, cond_cap: float):
    """Least squares of rows[k] ~ sum_j coeff_j eps_k^powers[j].

    Columns are scaled to unit norm before solving; returns coefficients and
    the per-node residual matrix of the fit.
    """
    V = np.stack([eps ** p for p in powers], axis=1)
    scale = np.linalg.norm(V, axis=0)
    Vs = V / scale
    cond = np.linalg.cond(Vs)
    if cond > cond_cap:
        raise IllConditionedFit(f"amplitude design matrix condition {cond:.3g} > {cond_cap:.3g}")
    coeff, *_ = np.linalg.lstsq(Vs, rows, rcond=None)
    resid = rows - Vs @ coeff
    return coeff / scale[:, None], resid


def extract_g1_g2(dn: DtNOperator, f: BoundaryTrace, sched: EpsilonSchedule = DEFAULT_SCHEDULE,
                  *, style: str = "pointwise", cond_cap: float = 1e6) -> LinearizedData:
    """Fit the DN response at the scheduled amplitudes to eps*g1 + eps^2*g2
    with cubic and quartic nuisance orders.

    Evaluates the map at +/- eps per scheduled value (2m solves).  The fit
    residual reported is the largest nodal misfit of the full model.
    """
    if dn.mode != "nonlinear":
        raise ValueError("extraction needs the nonlinear DN operator")
    eps = np.array(sched.values)
    data = np.concatenate([eps[:, None] * f.samples[None, :],
                           -eps[:, None] * f.samples[None, :]])
    traces = dn.apply_many(data, style=style)
    plus = np.stack([t.samples for t in traces[: len(eps)]])
    minus = np.stack([t.samples for t in traces[len(eps):]])
    odd = 0.5 * (plus - minus)
    even = 0.5 * (plus + minus)
    codd, r_odd = _parity_fit(eps, odd, (1, 3), cond_cap)
    ceven, r_even = _parity_fit(eps, even, (2, 4), cond_cap)
    fit_residual = float(max(np.abs(r_odd).max(), np.abs(r_even).max()))
    return LinearizedData(
        f=f,
        g1=BoundaryTrace(f.grid, codd[0]),
        g2=BoundaryTrace(f.grid, ceven[0]),
        fit_residual=fit_residual,
    )


def polarized_g2(dn: DtNOperator, f: BoundaryTrace, g: BoundaryTrace,
                 sched: EpsilonSchedule = DEFAULT_SCHEDULE,
                 *, style: str = "pointwise") -> BoundaryTrace:
    """Second-order response polarized in the data: g2(f+g) - g2(f-g).

    The value is four times the symmetric bilinear part of the quadratic
    response at (f, g).
    """
    a = extract_g1_g2(dn, f + g, sched, style=style)
    b = extract_g1_g2(dn, f - g, sched, style=style)
    return a.g2 - b.g2
