"""Forward solvers for the quasilinear boundary value problem and its
Dirichlet-to-Neumann map.

The flux law is C(x, q) = gamma(x) q + |q|^2 b(x) + R(x, q) with q = grad u.
Discretization is a conservative 7-point scheme on the embedded domain: the
equation is imposed at interior nodes, Dirichlet data lives on the ghost
ring, and fluxes are evaluated at cell faces (exact normal difference plus
averaged tangential differences for the nonlinear terms).

Two Neumann-trace styles are exposed:

* ``pointwise``: nu . C(x, grad u) sampled at the boundary nodes with mixed
  centered/one-sided node gradients.  Exact for globally linear solutions.
* ``flux_density``: the variational interface flux of the scheme divided by
  the quadrature weight.  Quadrature of this trace against any test trace
  reproduces the discrete Green identity to rounding error, which is what
  the reconstruction identities consume.

``DtNOperator.pair`` evaluates <Lambda f, w> through the energy form and is
exactly symmetric in (f, w) for the linear map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GradientOutOfRange, NonConvergence
from .grid_core import (
    BoundaryTrace,
    Grid,
    ScalarField,
    VectorField,
    ghost_gradient,
    gradient_arr,
)


# ---------------------------------------------------------------------------
# coefficient model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RemainderSpec:
    """Remainder flux R(x, q), smooth and cubically small near q = 0.

    ``zero`` is identically zero.  ``cubic_saturation`` is c(x) |q|^2 q with a
    smooth compactly supported coefficient c.  ``h`` is the radius of the
    admissible gradient ball and ``C2`` the recorded derivative bound.
    """

    kind: str = "zero"
    c: ScalarField | None = None
    h: float = 0.5
    C2: float | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "cubic_saturation"):
            raise ValueError(f"unknown remainder kind {self.kind!r}")
        if self.kind == "cubic_saturation" and self.c is None:
            raise ValueError("cubic_saturation needs a coefficient field c")
        if self.h <= 0:
            raise ValueError("gradient ball radius h must be positive")
        if self.C2 is None and self.kind == "cubic_saturation":
            grid = self.c.grid
            dc = np.abs(gradient_arr(grid, self.c.values)).max()
            object.__setattr__(self, "C2", float(6.0 * max(np.abs(self.c.values).max(), dc)))
        elif self.C2 is None:
            object.__setattr__(self, "C2", 0.0)

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero"

    def evaluate(self, c_at, q):
        """R at points with coefficient values ``c_at``; q has shape (..., 3)."""
        if self.is_zero:
            return np.zeros_like(q)
        q2 = np.sum(q * q, axis=-1, keepdims=True)
        return c_at[..., None] * q2 * q

    def dq_normal(self, c_at, q, axis):
        """d R_a / d q_a, the face-normal Jacobian entry."""
        if self.is_zero:
            return 0.0
        q2 = np.sum(q * q, axis=-1)
        return c_at * (q2 + 2.0 * q[..., axis] ** 2)

    def check_bounds(self, rng: np.random.Generator, n_samples: int = 256) -> float:
        """Sampled check of |R| <= C2 |q|^3 and |dR/dq| <= C2 |q|^2.

        Returns the maximum observed ratio (<= 1 when the bound holds).
        """
        if self.is_zero:
            return 0.0
        grid = self.c.grid
        flat = self.c.values.reshape(-1)
        idx = rng.integers(0, flat.size, n_samples)
        q = rng.uniform(-1, 1, (n_samples, 3))
        q *= (self.h * rng.uniform(0.05, 1.0, (n_samples, 1))) / np.linalg.norm(q, axis=1, keepdims=True)
        c_at = flat[idx]
        qn = np.linalg.norm(q, axis=1)
        r0 = np.linalg.norm(self.evaluate(c_at, q), axis=1) / np.maximum(self.C2 * qn ** 3, 1e-300)
        r1 = np.abs(self.dq_normal(c_at, q, 0)) / np.maximum(self.C2 * qn ** 2, 1e-300)
        return float(max(r0.max(), r1.max()))


@dataclass(frozen=True)
class CoefficientSet:
    """Admissible coefficient triple (gamma, b, remainder)."""

    gamma: ScalarField
    b: VectorField
    remainder: RemainderSpec

    def __post_init__(self):
        g = self.gamma.values
        grid = self.gamma.grid
        c1 = float(g[grid.boundary.known_mask].min())
        if c1 <= 0:
            raise ValueError("gamma must be bounded below by a positive constant")
        shell = np.ones(grid.dims, dtype=bool)
        shell[1:-1, 1:-1, 1:-1] = False
        if np.max(np.abs(g[shell] - 1.0)) > 1e-12:
            raise ValueError("gamma - 1 must be supported strictly inside the grid box")
        object.__setattr__(self, "C1", c1)

    @property
    def grid(self) -> Grid:
        return self.gamma.grid


@dataclass(frozen=True)
class QuasilinearSolveResult:
    u: ScalarField
    iterations: int
    residual_norm: float
    w2p_proxy_norm: float


# ---------------------------------------------------------------------------
# face machinery
# ---------------------------------------------------------------------------

def face_average(values: np.ndarray, axis: int) -> np.ndarray:
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (values[tuple(lo)] + values[tuple(hi)])


def face_diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    lo = [slice(None)] * values.ndim
    hi = [slice(None)] * values.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return (values[tuple(hi)] - values[tuple(lo)]) / h


def _tangential_node_diff(u, known, axis, h):
    """Centered difference along ``axis`` where both neighbors carry values."""
    n = u.shape[axis]
    d = np.zeros_like(u)
    ok = np.zeros(u.shape, dtype=bool)
    sl = [slice(None)] * 3

    def ax(s):
        t = list(sl)
        t[axis] = s
        return tuple(t)

    d[ax(slice(1, -1))] = (u[ax(slice(2, None))] - u[ax(slice(None, -2))]) / (2 * h)
    ok[ax(slice(1, -1))] = known[ax(slice(2, None))] & known[ax(slice(None, -2))]
    return d, ok


def face_gradient(grid: Grid, u: np.ndarray, known: np.ndarray, axis: int) -> np.ndarray:
    """Full gradient vector at the faces of one axis, shape faces + (3,).

    Normal component is the exact two-point difference; tangential components
    average the centered node differences of the two face endpoints, skipping
    endpoints whose stencil leaves the known region.
    """
    h = grid.spacing
    out = np.zeros(face_average(u, axis).shape + (3,), dtype=u.dtype)
    out[..., axis] = face_diff(u, axis, h[axis])
    for b in range(3):
        if b == axis:
            continue
        d, ok = _tangential_node_diff(u, known, b, h[b])
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        w = ok[lo].astype(float) + ok[hi].astype(float)
        s = d[lo] * ok[lo] + d[hi] * ok[hi]
        out[..., b] = np.divide(s, w, out=np.zeros_like(s), where=w > 0)
    return out


# ---------------------------------------------------------------------------
# embedded linear operator
# ---------------------------------------------------------------------------

class EmbeddedOperator:
    """Conservative 7-point operator -div(gamma grad u) + potential*u on the
    embedded domain with Dirichlet data on the ghost ring.

    Factorizations are cached; the object is immutable after construction and
    safe for concurrent solves.
    """

    def __init__(self, grid: Grid, gamma: np.ndarray | None = None,
                 potential: np.ndarray | None = None, method: str = "direct"):
        self.grid = grid
        self.geo = grid.boundary
        self.gamma = np.ones(grid.dims) if gamma is None else np.asarray(gamma, float)
        self.potential = potential
        self.method = method

        interior = grid.interior_mask
        self.n_int = int(interior.sum())
        dof = -np.ones(grid.dims, dtype=np.int64)
        dof[interior] = np.arange(self.n_int)
        self.dof = dof
        self.int_flat = np.ravel_multi_index(np.argwhere(interior).T, grid.dims)

        h = grid.spacing
        rows, cols, vals = [], [], []
        diag = np.zeros(self.n_int)
        # Ghost coupling: for each interface face, record (interior dof,
        # ghost id, gamma_f/h^2) to build Dirichlet right-hand sides.
        g_rows, g_gids, g_vals = [], [], []
        self._face_gamma = []
        for a in range(3):
            gf = face_average(self.gamma, a)
            self._face_gamma.append(gf)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            ii = interior[lo] & interior[hi]
            w = gf[ii] / h[a] ** 2
            d_lo, d_hi = dof[lo][ii], dof[hi][ii]
            rows += [d_lo, d_hi]
            cols += [d_hi, d_lo]
            vals += [-w, -w]
            np.add.at(diag, d_lo, w)
            np.add.at(diag, d_hi, w)
            for face_mask, d_side, g_side in (
                (interior[lo] & self.geo.ghost_mask[hi], dof[lo], self.geo.ghost_id[hi]),
                (self.geo.ghost_mask[lo] & interior[hi], dof[hi], self.geo.ghost_id[lo]),
            ):
                w = gf[face_mask] / h[a] ** 2
                np.add.at(diag, d_side[face_mask], w)
                g_rows.append(d_side[face_mask])
                g_gids.append(g_side[face_mask])
                g_vals.append(w)
        if potential is not None:
            diag += np.asarray(potential, float).reshape(-1)[self.int_flat]
        fm_rows, fm_cols, fm_vals = [], [], []
        for a in range(3):
            gf = self._face_gamma[a]
            area = h[(a + 1) % 3] * h[(a + 2) % 3]
            strides = np.array([grid.dims[1] * grid.dims[2], grid.dims[2], 1])
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            for ghost_above in (True, False):
                if ghost_above:
                    m = interior[lo] & self.geo.ghost_mask[hi]
                    gid = self.geo.ghost_id[hi][m]
                    sign = 1.0
                else:
                    m = self.geo.ghost_mask[lo] & interior[hi]
                    gid = self.geo.ghost_id[lo][m]
                    sign = -1.0
                fidx = np.argwhere(m)
                n_lo = fidx @ strides
                n_hi = n_lo + strides[a]
                w = sign * gf[m] * area / h[a]
                fm_rows += [gid, gid]
                fm_cols += [n_hi, n_lo]
                fm_vals += [w, -w]
        self.flux_matrix = sp.csr_matrix(
            (np.concatenate(fm_vals), (np.concatenate(fm_rows), np.concatenate(fm_cols))),
            shape=(self.geo.n_nodes, int(np.prod(grid.dims))),
        )
        rows.append(np.arange(self.n_int))
        cols.append(np.arange(self.n_int))
        vals.append(diag)
        A = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_int, self.n_int),
        )
        self.matrix = A
        self._ghost_coupling = sp.csr_matrix(
            (np.concatenate(g_vals), (np.concatenate(g_rows), np.concatenate(g_gids))),
            shape=(self.n_int, self.geo.n_nodes),
        )
        if method == "direct":
            self._solver = spla.splu(A)
        elif method == "dense":
            self._dense = A.toarray()
            self._solver = None
        elif method == "cg":
            self._solver = None
            self._ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=20)
        else:
            raise ValueError(f"unknown linear solver method {method!r}")

    # -- linear algebra ------------------------------------------------------

    def solve_many(self, traces: np.ndarray, sources: np.ndarray | None = None) -> np.ndarray:
        """Batched full-grid solves; ``traces`` has shape (B, n_nodes)."""
        rhs = (self._ghost_coupling @ traces.T)
        if sources is not None:
            rhs = rhs + sources.reshape(len(traces), -1)[:, self.int_flat].T
        u_int = self._solve_interior(rhs)
        out = np.zeros((len(traces),) + self.grid.dims, dtype=u_int.dtype)
        flat = out.reshape(len(traces), -1)
        flat[:, self.int_flat] = u_int.T
        flat[:, self.geo.flat_index] = traces
        return out

    def _solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        if self.method == "direct":
            return self._solver.solve(rhs)
        if self.method == "dense":
            return np.linalg.solve(self._dense, rhs)
        out = np.empty_like(rhs)
        rhs2 = rhs if rhs.ndim == 2 else rhs[:, None]
        out2 = out if out.ndim == 2 else out[:, None]
        M = spla.LinearOperator(self.matrix.shape, self._ilu.solve)
        for k in range(rhs2.shape[1]):
            x, info = spla.cg(self.matrix, rhs2[:, k], rtol=1e-12, atol=0.0, M=M, maxiter=2000)
            if info != 0:
                raise NonConvergence(f"cg failed with info={info}")
            out2[:, k] = x
        return out

    def solve(self, trace_values: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
        """Full-grid solution with ghost values set to the Dirichlet data.

        ``source`` is an interior right-hand side for
        -div(gamma grad u) + potential*u = source (full-grid array).
        """
        trace_values = np.asarray(trace_values)
        if np.iscomplexobj(trace_values) or (source is not None and np.iscomplexobj(source)):
            re = self.solve(trace_values.real, None if source is None else source.real)
            im = self.solve(trace_values.imag, None if source is None else source.imag)
            return re + 1j * im
        rhs = self._ghost_coupling @ trace_values
        if source is not None:
            rhs = rhs + source.reshape(-1)[self.int_flat]
        u_int = self._solve_interior(rhs)
        u = np.zeros(self.grid.dims)
        u.reshape(-1)[self.int_flat] = u_int
        u.reshape(-1)[self.geo.flat_index] = trace_values
        return u

    def residual_interior(self, u: np.ndarray, source: np.ndarray | None = None) -> np.ndarray:
        """Interior residual of -div(gamma grad u) + pot*u - source (flat)."""
        u_int = u.reshape(-1)[self.int_flat] if u.ndim == 3 else u
        ghost = u.reshape(-1)[self.geo.flat_index]
        r = self.matrix @ u_int - self._ghost_coupling @ ghost
        if source is not None:
            r = r - source.reshape(-1)[self.int_flat]
        return r

    # -- energy pairing and fluxes -------------------------------------------

    def energy_pair(self, u: np.ndarray, v: np.ndarray):
        """a(u, v) = sum_f gamma_f Du Dv h^3 + sum_i pot u v h^3.

        Equals <Lambda f, g> when u, v are discrete solutions with traces
        f, g; exactly symmetric.
        """
        grid = self.grid
        h = grid.spacing
        vol = grid.cell_volume
        total = 0.0
        for a in range(3):
            du = face_diff(u, a, h[a])
            dv = face_diff(v, a, h[a])
            m = self.geo.face_active[a]
            total = total + np.sum(self._face_gamma[a][m] * du[m] * dv[m]) * vol
        if self.potential is not None:
            m = grid.interior_mask
            total = total + np.sum(self.potential[m] * u[m] * v[m]) * vol
        return total

    def ghost_flux(self, u: np.ndarray) -> np.ndarray:
        """Variational interface flux N_g with sum_g w_g N_g = a(u, w~)."""
        return self.flux_matrix @ u.reshape(-1)

    def ghost_flux_many(self, u_batch: np.ndarray) -> np.ndarray:
        return (self.flux_matrix @ u_batch.reshape(len(u_batch), -1).T).T


# ---------------------------------------------------------------------------
# linear solves
# ---------------------------------------------------------------------------

def solve_conductivity(gamma: ScalarField, f: BoundaryTrace,
                       method: str = "direct",
                       operator: EmbeddedOperator | None = None) -> ScalarField:
    """Solve div(gamma grad u) = 0 in the domain with u = f on the ghost ring."""
    op = operator or EmbeddedOperator(gamma.grid, gamma.values, method=method)
    u = op.solve(f.samples)
    if np.iscomplexobj(u):
        raise ValueError("solve_conductivity expects real Dirichlet data")
    return ScalarField(gamma.grid, u)


def nonlinear_flux_nodes(coeffs: CoefficientSet, u: np.ndarray) -> np.ndarray:
    """Quadratic plus remainder flux b |grad u|^2 + R(grad u) at the known
    nodes, from the availability-aware node gradients (zero elsewhere)."""
    grid = coeffs.grid
    geo = grid.boundary
    N = int(np.prod(grid.dims))
    q = np.stack([(M @ u.reshape(-1)) for M in geo.gradient_matrices], axis=-1)
    q2 = np.sum(q * q, axis=-1, keepdims=True)
    G = coeffs.b.values.reshape(N, 3) * q2
    if not coeffs.remainder.is_zero:
        G = G + coeffs.remainder.c.values.reshape(N, 1) * q2 * q
    G[~geo.known_mask.reshape(-1)] = 0.0
    return G.reshape(grid.dims + (3,))


def second_order_source(grid: Grid, b: VectorField, u1: np.ndarray,
                        coeffs: CoefficientSet | None = None) -> np.ndarray:
    """Interior source +div(b |grad u1|^2) in the convention
    -div(gamma grad u2) = source, with the centered divergence and node
    gradients of the nonlinear scheme (full-grid array)."""
    if coeffs is None:
        coeffs = CoefficientSet.__new__(CoefficientSet)
        object.__setattr__(coeffs, "gamma", ScalarField.constant(grid, 1.0))
        object.__setattr__(coeffs, "b", b)
        object.__setattr__(coeffs, "remainder", RemainderSpec())
    G = nonlinear_flux_nodes(coeffs, u1)
    h = grid.spacing
    out = np.zeros(grid.dims)
    for a in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[a] = slice(None, -2)
        sl_hi[a] = slice(2, None)
        mid = [slice(None)] * 3
        mid[a] = slice(1, -1)
        out[tuple(mid)] += (G[tuple(sl_hi) + (a,)] - G[tuple(sl_lo) + (a,)]) / (2 * h[a])
    out[~grid.interior_mask] = 0.0
    return out


def solve_second_order(gamma: ScalarField, b: VectorField, u1: ScalarField,
                       operator: EmbeddedOperator | None = None) -> ScalarField:
    """Solve div(gamma grad u2) + div(b |grad u1|^2) = 0, u2 = 0 on the ring."""
    grid = gamma.grid
    op = operator or EmbeddedOperator(grid, gamma.values)
    src = second_order_source(grid, b, u1.values)
    u2 = op.solve(np.zeros(grid.boundary.n_nodes), source=src)
    return ScalarField(grid, u2)


# ---------------------------------------------------------------------------
# quasilinear Newton solver
# ---------------------------------------------------------------------------

class NonlinearNodeOps:
    """Sparse assembly of the quadratic and remainder flux terms on the
    nodes where their coefficients are nonzero.

    The linear flux keeps the face-based 7-point form that defines the
    matrix; the nonlinear terms use node gradients and a centered
    conservative divergence.  Centered pairs are exactly skew-adjoint on the
    support, so the boundary pairings below evaluate the corresponding
    Green-identity functionals to rounding error, and products of lattice
    exponentials keep an exact frequency through the node gradient.
    """

    def __init__(self, coeffs: CoefficientSet, operator: EmbeddedOperator):
        grid = coeffs.grid
        geo = grid.boundary
        self.grid = grid
        self.operator = operator
        self.vol = grid.cell_volume
        N = int(np.prod(grid.dims))
        weight = np.abs(coeffs.b.values).sum(-1)
        if not coeffs.remainder.is_zero:
            weight = weight + np.abs(coeffs.remainder.c.values)
        active = geo.known_mask & (weight > 0)
        self.n_active = int(active.sum())
        self.empty = self.n_active == 0
        if self.empty:
            return
        nodes = np.argwhere(active)
        self.S_flat = np.ravel_multi_index(nodes.T, grid.dims)
        self.grad_S = [M[self.S_flat] for M in geo.gradient_matrices]
        self.b_S = coeffs.b.values.reshape(N, 3)[self.S_flat]
        self.c_S = (coeffs.remainder.c.values.reshape(N)[self.S_flat]
                    if not coeffs.remainder.is_zero else None)
        dims = np.array(grid.dims)
        strides = np.array([grid.dims[1] * grid.dims[2], grid.dims[2], 1])
        h = grid.spacing
        self.h = h
        dof_flat = operator.dof.reshape(-1)
        gid_flat = geo.ghost_id.reshape(-1)
        self.scatter = []
        ring = False
        known_flat = geo.known_mask.reshape(-1)
        for a in range(3):
            entry = {}
            for step, key in ((+1, "plus"), (-1, "minus")):
                pos = nodes[:, a] + step
                ok = (pos >= 0) & (pos < dims[a])
                j = np.clip(self.S_flat + step * strides[a], 0, N - 1)
                entry[key + "_dof"] = np.where(ok, dof_flat[j], -1)
                entry[key + "_gid"] = np.where(ok, gid_flat[j], -1)
                ring = ring or bool(np.any(ok & ~known_flat[j]))
            self.scatter.append(entry)
        # Nonzero coefficients touching the ghost ring would make the
        # centered boundary corrections only first order there.
        self.touches_ring = ring

    def _flux(self, U: np.ndarray) -> np.ndarray:
        """Nonlinear flux G at the active nodes, shape (3, nS, B)."""
        q = np.stack([G @ U for G in self.grad_S])
        q2 = np.einsum("cfb,cfb->fb", q, q)
        G = self.b_S.T[:, :, None] * q2[None]
        if self.c_S is not None:
            G = G + self.c_S[None, :, None] * q2[None] * q
        return G

    def add_residual_cols(self, U: np.ndarray, res_cols: np.ndarray) -> None:
        """Add -div of the nonlinear flux to the interior residual columns.

        ``U`` has shape (N, B), ``res_cols`` (n_int, B).
        """
        if self.empty:
            return
        G = self._flux(U)
        for a in range(3):
            w = G[a] / (2.0 * self.h[a])
            sc = self.scatter[a]
            for dof, sign in ((sc["minus_dof"], -1.0), (sc["plus_dof"], +1.0)):
                ok = dof >= 0
                if ok.any():
                    np.add.at(res_cols, dof[ok], sign * w[ok])

    def pair_cols(self, U: np.ndarray, field_grads: np.ndarray) -> np.ndarray:
        """sum_j G_j(u) . (grad w)_j h^3 for each test field, shape (B, P).

        ``field_grads`` holds the node gradients of the test fields at the
        active nodes, shape (P, nS, 3).
        """
        if self.empty:
            P = len(field_grads)
            return np.zeros((U.shape[1], P))
        G = self._flux(U)
        return np.einsum("cfb,pfc->bp", G, field_grads) * self.vol

    def field_grads_at_active(self, fields: list) -> np.ndarray:
        """Node gradients of full-grid fields at the active nodes."""
        if self.empty:
            return np.zeros((len(fields), 0, 3))
        out = np.zeros((len(fields), self.n_active, 3))
        for p, w in enumerate(fields):
            flat = w.reshape(-1)
            for c, G in enumerate(self.grad_S):
                out[p, :, c] = G @ flat
        return out

    def ghost_corrections_cols(self, U: np.ndarray, out_cols: np.ndarray) -> None:
        """Boundary terms of the centered summation by parts, added to the
        variational interface flux columns (exact while the nonlinear
        coefficients stay off the ghost ring)."""
        if self.empty:
            return
        G = self._flux(U)
        for a in range(3):
            w = G[a] * (self.vol / (2.0 * self.h[a]))
            sc = self.scatter[a]
            for gid, sign in ((sc["plus_gid"], +1.0), (sc["minus_gid"], -1.0)):
                ok = gid >= 0
                if ok.any():
                    np.add.at(out_cols, gid[ok], sign * w[ok])


def _nonlinear_residual(coeffs: CoefficientSet, u: np.ndarray) -> np.ndarray:
    """Reference interior residual -div C(x, grad u): face-flux form for the
    linear term, centered conservative form for the quadratic and remainder
    terms; u may carry one leading batch axis."""
    grid = coeffs.grid
    h = grid.spacing
    single = u.ndim == 3
    ub = u[None] if single else u
    out = np.zeros(ub.shape)
    for a in range(3):
        gf = face_average(coeffs.gamma.values, a)
        m = grid.boundary.face_active[a]
        lo = [slice(None), slice(None), slice(None), slice(None)]
        hi = list(lo)
        lo[1 + a] = slice(None, -1)
        hi[1 + a] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        flux = gf[None] * (ub[hi] - ub[lo]) / h[a]
        flux = np.where(m[None], flux, 0.0)
        d = np.zeros(ub.shape)
        d[hi] += flux
        d[lo] -= flux
        out += d / h[a]
    for k, uk in enumerate(ub):
        G = nonlinear_flux_nodes(coeffs, uk)
        for a in range(3):
            sl_lo = [slice(None)] * 3
            sl_hi = [slice(None)] * 3
            sl_lo[a] = slice(None, -2)
            sl_hi[a] = slice(2, None)
            mid = [slice(None)] * 3
            mid[a] = slice(1, -1)
            out[k][tuple(mid)] -= (G[tuple(sl_hi) + (a,)] - G[tuple(sl_lo) + (a,)]) / (2 * h[a])
    out[:, ~grid.interior_mask] = 0.0
    return out[0] if single else out


def _max_interior_gradient(grid: Grid, u: np.ndarray) -> float:
    """Largest |grad u| over interior nodes; u may carry a batch axis."""
    m = grid.interior_mask
    if not m.any():
        return 0.0
    axes = (1, 2, 3) if u.ndim == 4 else (0, 1, 2)
    g = np.gradient(u, *grid.spacing, axis=axes, edge_order=2)
    g2 = sum(c * c for c in g)
    return float(np.sqrt(g2[..., m].max() if u.ndim == 4 else g2[m].max()))


def _w2p_proxy(grid: Grid, u: np.ndarray) -> float:
    g = gradient_arr(grid, u)
    h = grid.spacing
    acc = np.abs(u[grid.interior_mask]) ** 2
    acc = acc + np.sum(g[grid.interior_mask] ** 2, axis=-1)
    d2sum = np.zeros(grid.dims)
    for a in range(3):
        sl = [slice(None)] * 3
        d2 = np.zeros(grid.dims)

        def ax(s):
            t = list(sl)
            t[a] = s
            return tuple(t)

        d2[ax(slice(1, -1))] = (u[ax(slice(2, None))] - 2 * u[ax(slice(1, -1))]
                                + u[ax(slice(None, -2))]) / h[a] ** 2
        d2sum += d2 ** 2
    acc = acc + d2sum[grid.interior_mask]
    return float(np.sqrt(acc.sum() * grid.cell_volume))


def _newton_matrix(coeffs: CoefficientSet, u: np.ndarray) -> EmbeddedOperator:
    """Jacobian operator with face-normal linearization of the quadratic and
    remainder terms folded into an effective face coefficient.

    Tangential couplings of the nonlinear terms are omitted; they are small
    in the admissible regime and do not change the converged solution.
    """
    grid = coeffs.grid
    known = grid.boundary.known_mask
    # Effective gamma at nodes: gamma + 2 q_a b_a + dR_a/dq_a, averaged per
    # axis via the node gradient (adequate for a Newton preconditioner).
    g = gradient_arr(grid, u)
    extra = 2.0 * np.sum(coeffs.b.values * g, axis=-1)
    if not coeffs.remainder.is_zero:
        extra = extra + 3.0 * coeffs.remainder.c.values * np.sum(g * g, axis=-1)
    geff = np.maximum(coeffs.gamma.values + extra, 0.1 * coeffs.C1)
    return EmbeddedOperator(grid, geff)


def solve_quasilinear(coeffs: CoefficientSet, f: BoundaryTrace, eps: float,
                      *, jacobian: str = "frozen", tol: float = 1e-12,
                      max_iter: int = 40,
                      operator: EmbeddedOperator | None = None) -> QuasilinearSolveResult:
    """Damped Newton solve of div C(x, grad u) = 0, u = eps*f on the ring.

    ``jacobian="frozen"`` reuses the factorized linear-part operator (fast in
    the small-data regime); ``"newton"`` reassembles the face-normal analytic
    Jacobian every iteration; a Picard step is taken when a Newton step would
    leave the gradient ball.
    """
    u, its, res = _quasilinear_batch(
        coeffs, f.samples[None, :] * eps, jacobian=jacobian, tol=tol,
        max_iter=max_iter, operator=operator)
    grid = coeffs.grid
    return QuasilinearSolveResult(
        u=ScalarField(grid, u[0]),
        iterations=int(its),
        residual_norm=float(res[0]),
        w2p_proxy_norm=_w2p_proxy(grid, u[0]),
    )


def _quasilinear_batch(coeffs: CoefficientSet, data: np.ndarray, *,
                       jacobian: str = "frozen", tol: float = 1e-12,
                       max_iter: int = 40,
                       operator: EmbeddedOperator | None = None,
                       face_ops: "NonlinearNodeOps | None" = None):
    """Newton iteration vectorized over a batch of Dirichlet data rows.

    Returns (u_batch, iterations, residual_norms); residuals are l2 norms of
    the interior residual scaled by the cell volume^(1/2).
    """
    grid = coeffs.grid
    h_ball = coeffs.remainder.h
    lin = operator or EmbeddedOperator(grid, coeffs.gamma.values)
    ctx = face_ops or NonlinearNodeOps(coeffs, lin)
    B = data.shape[0]
    N = int(np.prod(grid.dims))

    # Work in column layout (N, B): the sparse gathers and the factorized
    # solves then run without transpose copies.
    U = np.zeros((N, B))
    U[lin.geo.flat_index] = data.T
    U[lin.int_flat] = lin._solve_interior(lin._ghost_coupling @ data.T)
    sqv = np.sqrt(grid.cell_volume)

    def check_gradient(U_cols):
        worst = _max_interior_gradient(
            grid, np.ascontiguousarray(U_cols.T).reshape((B,) + grid.dims))
        if worst > h_ball:
            raise GradientOutOfRange(
                f"|grad u| = {worst:.3g} left the admissible ball of radius {h_ball:.3g}")

    def batch_residual(U_cols):
        res = lin.matrix @ U_cols[lin.int_flat] - lin._ghost_coupling @ U_cols[lin.geo.flat_index]
        ctx.add_residual_cols(U_cols, res)
        return res

    check_gradient(U)
    res_cols = batch_residual(U)
    rnorm = np.linalg.norm(res_cols, axis=0) * sqv
    scale = np.maximum(rnorm.max(), 1e-300)
    floor = max(tol * scale, 1e-15 * max(np.abs(data).max(), 1.0) / grid.spacing.min() ** 2)

    its = 0
    while rnorm.max() > floor and its < max_iter:
        its += 1
        if jacobian == "newton" and B == 1:
            J = _newton_matrix(coeffs, np.ascontiguousarray(U[:, 0]).reshape(grid.dims))
            step = J._solve_interior(res_cols)
        else:
            step = lin._solve_interior(res_cols)
        damp = 1.0
        for _ in range(8):
            cand = U.copy()
            cand[lin.int_flat] -= damp * step
            cres = batch_residual(cand)
            cnorm = np.linalg.norm(cres, axis=0) * sqv
            if cnorm.max() <= rnorm.max() or cnorm.max() <= floor:
                break
            damp *= 0.5
        else:
            raise NonConvergence("Newton damping failed to reduce the residual",
                                 residual=float(rnorm.max()), iterations=its)
        U, res_cols, rnorm = cand, cres, cnorm
    if rnorm.max() > floor:
        raise NonConvergence("quasilinear iteration hit the iteration cap",
                             residual=float(rnorm.max()), iterations=its)
    # The intermediate Newton iterates move by the size of the nonlinear
    # correction, so checking the admissible ball at the linear starting
    # point and at the converged solution brackets the whole sweep.
    check_gradient(U)
    u = np.ascontiguousarray(U.T).reshape((B,) + grid.dims)
    return u, its, rnorm


# ---------------------------------------------------------------------------
# DN operator
# ---------------------------------------------------------------------------

def _pointwise_flux_trace(grid: Grid, coeffs: CoefficientSet | None,
                          gamma: np.ndarray | None, u: np.ndarray) -> np.ndarray:
    geo = grid.boundary
    gq = ghost_gradient(grid, u)
    if coeffs is None:
        gb = gamma.reshape(-1)[geo.flat_index]
        flux = gb[:, None] * gq
    else:
        gb = coeffs.gamma.values.reshape(-1)[geo.flat_index]
        bb = coeffs.b.values.reshape(-1, 3)[geo.flat_index]
        q2 = np.sum(np.abs(gq) ** 2, axis=-1, keepdims=True)
        flux = gb[:, None] * gq + q2 * bb
        if not coeffs.remainder.is_zero:
            cb = coeffs.remainder.c.values.reshape(-1)[geo.flat_index]
            flux = flux + cb[:, None] * q2 * gq
    return np.einsum("ij,ij->i", geo.normals, flux)


def _nonlinear_ghost_flux(coeffs: CoefficientSet, u: np.ndarray,
                          operator: EmbeddedOperator | None = None) -> np.ndarray:
    """Variational interface flux of the full flux law (reference path)."""
    op = operator or EmbeddedOperator(coeffs.grid, coeffs.gamma.values)
    ctx = NonlinearNodeOps(coeffs, op)
    out = (op.flux_matrix @ u.reshape(-1))[:, None]
    ctx.ghost_corrections_cols(u.reshape(-1, 1), out)
    return out[:, 0]


class DtNOperator:
    """Dirichlet-to-Neumann response of the forward model.

    ``linear_gamma`` mode maps f to gamma * d_nu u for the linear equation and
    is symmetric with respect to the boundary quadrature pairing (use
    :meth:`pair`).  ``nonlinear`` mode maps f to nu . C(x, grad u) for the
    quasilinear solve with Dirichlet data eps*f.
    """

    def __init__(self, mode, grid, *, coeffs=None, gamma=None, eps=None,
                 operator=None, jacobian="frozen"):
        self.mode = mode
        self.grid = grid
        self.coeffs = coeffs
        self.eps = eps
        self.jacobian = jacobian
        if mode == "linear":
            self.gamma = gamma
            self.operator = operator or EmbeddedOperator(grid, gamma)
            self.node_ops = None
        elif mode == "nonlinear":
            self.gamma = coeffs.gamma.values
            self.operator = operator or EmbeddedOperator(grid, coeffs.gamma.values)
            self.node_ops = NonlinearNodeOps(coeffs, self.operator)
        else:
            raise ValueError(f"unknown DN mode {mode!r}")

    @classmethod
    def linear_gamma(cls, gamma: ScalarField, method: str = "direct") -> "DtNOperator":
        op = EmbeddedOperator(gamma.grid, gamma.values, method=method)
        return cls("linear", gamma.grid, gamma=gamma.values, operator=op)

    @classmethod
    def nonlinear(cls, coeffs: CoefficientSet, eps: float,
                  jacobian: str = "frozen") -> "DtNOperator":
        return cls("nonlinear", coeffs.grid, coeffs=coeffs, eps=eps, jacobian=jacobian)

    # -- solution fields -----------------------------------------------------

    def solution(self, f: BoundaryTrace) -> np.ndarray:
        if self.mode == "linear":
            return self.operator.solve(f.samples)
        u, _, _ = _quasilinear_batch(self.coeffs, self.eps * f.samples[None, :],
                                     jacobian=self.jacobian, operator=self.operator,
                                     face_ops=self.node_ops)
        return u[0]

    def apply(self, f: BoundaryTrace, style: str = "pointwise") -> BoundaryTrace:
        u = self.solution(f)
        return self._trace_of(u, style)

    def apply_many(self, data_rows: np.ndarray, style: str = "pointwise") -> list:
        """Nonlinear responses for a batch of raw Dirichlet data rows (the
        amplitude is part of the data; the operator's eps is not applied)."""
        if self.mode != "nonlinear":
            raise ValueError("apply_many is for the nonlinear mode")
        u, _, _ = _quasilinear_batch(self.coeffs, np.asarray(data_rows),
                                     jacobian=self.jacobian, operator=self.operator,
                                     face_ops=self.node_ops)
        return [self._trace_of(ub, style) for ub in u]

    def solutions_many(self, data_rows: np.ndarray) -> np.ndarray:
        if self.mode != "nonlinear":
            raise ValueError("solutions_many is for the nonlinear mode")
        u, _, _ = _quasilinear_batch(self.coeffs, np.asarray(data_rows),
                                     jacobian=self.jacobian, operator=self.operator,
                                     face_ops=self.node_ops)
        return u

    def fluxes_many(self, u_batch: np.ndarray) -> np.ndarray:
        """Variational interface flux of the full flux law, batched."""
        U = u_batch.reshape(len(u_batch), -1).T
        out = self.operator.flux_matrix @ U
        if self.node_ops is not None:
            self.node_ops.ghost_corrections_cols(U, out)
        return np.ascontiguousarray(out.T)

    def pair_functionals(self, u_batch: np.ndarray, probe_ghost: np.ndarray) -> np.ndarray:
        """<N(u), w> for a batch of solutions against boundary test values,
        shape (B, P): the total variational interface flux (linear part plus
        the centered boundary corrections of the nonlinear part) paired with
        the test values on the ghost ring.

        For solutions of the interior equations this equals the discrete
        Green identity value for any extension of the test data, so pairing
        against a discretely harmonic probe isolates the volume bilinear of
        the quadratic flux term exactly.
        """
        U = u_batch.reshape(len(u_batch), -1).T
        out = self.operator.flux_matrix @ U
        if self.node_ops is not None:
            self.node_ops.ghost_corrections_cols(U, out)
        return out.T @ probe_ghost.T

    def _trace_of(self, u: np.ndarray, style: str) -> BoundaryTrace:
        geo = self.grid.boundary
        if style == "pointwise":
            if self.mode == "linear":
                vals = _pointwise_flux_trace(self.grid, None, self.gamma, u)
            else:
                vals = _pointwise_flux_trace(self.grid, self.coeffs, None, u)
        elif style == "flux_density":
            if self.mode == "linear":
                N = self.operator.ghost_flux(u)
            else:
                N = self.fluxes_many(u[None])[0]
            vals = N / geo.areas
        else:
            raise ValueError(f"unknown trace style {style!r}")
        return BoundaryTrace(self.grid, vals)

    def pair(self, f: BoundaryTrace, w: BoundaryTrace):
        """<Lambda f, w> through the discrete Green identity (energy form)."""
        if self.mode == "linear":
            uf = self.operator.solve(f.samples)
            uw = self.operator.solve(w.samples)
            return self.operator.energy_pair(uf, uw)
        u = self.solution(f)
        return float(self.pair_functionals(u[None], w.samples[None])[0, 0])


def dn_apply(op: DtNOperator, f: BoundaryTrace, style: str = "pointwise") -> BoundaryTrace:
    return op.apply(f, style=style)


def dn_pair(op: DtNOperator, f: BoundaryTrace, w: BoundaryTrace):
    return op.pair(f, w)


def linear_energy(gamma: ScalarField, u: np.ndarray) -> float:
    """Face-based discrete energy integral gamma |grad u|^2 over the domain."""
    op = EmbeddedOperator(gamma.grid, gamma.values)
    return float(op.energy_pair(u, u))
