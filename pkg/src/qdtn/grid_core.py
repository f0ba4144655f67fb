"""Uniform-grid field algebra on an embedded domain.

The computational box is a uniform Cartesian grid with an embedded physical
domain (ball or axis-aligned box) strictly inside it.  Differential operators
are second-order finite differences; the centered gradient/divergence pair is
exactly skew-adjoint on fields supported away from the box faces, so discrete
Green identities hold to rounding error on compactly supported data.

The discrete boundary of the embedded domain is the "ghost ring": the layer of
exterior grid nodes whose 6-point stencil touches an interior node.  Dirichlet
data lives on those nodes.  Outward normals come from the level set; surface
quadrature weights are the staircase interface areas projected onto the true
normal (vector-area rule), which keeps the discrete divergence theorem exact
on the staircase region and makes the total weight approximate the surface
area to second order.

Fields are immutable after construction and every operation in this module is
a pure function, so concurrent use needs no synchronization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


def _vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=float).reshape(3)
    return v


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# domain shapes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ball:
    """Ball domain, described by the signed distance |x - center| - radius."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _freeze(_vec3(self.center)))
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        return np.sqrt(np.sum(d * d, axis=-1)) - self.radius

    def normal(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        r = np.where(r == 0.0, 1.0, r)
        return d / r

    @property
    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2


@dataclass(frozen=True)
class BoxDomain:
    """Axis-aligned box domain given by its corners."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _freeze(_vec3(self.lo)))
        object.__setattr__(self, "hi", _freeze(_vec3(self.hi)))
        if not np.all(self.hi > self.lo):
            raise ValueError("box corners must satisfy hi > lo")

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        # Signed distance of an axis-aligned box.
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = np.abs(pts - c) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, pts: np.ndarray) -> np.ndarray:
        c = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        q = (np.abs(pts - c) - half)
        # Direction of steepest sdf increase: dominant components, signed.
        m = np.max(q, axis=-1, keepdims=True)
        n = np.where(q >= m - 1e-12, 1.0, 0.0) * np.sign(pts - c)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        norm = np.where(norm == 0.0, 1.0, norm)
        return n / norm

    @property
    def surface_area(self) -> float:
        e = self.hi - self.lo
        return 2.0 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

class Grid:
    """Uniform grid over a box containing the physical domain.

    Nodes are x_i = lo + i*h per axis with h = (hi - lo)/n, i = 0..n-1; the
    node at the upper box face is identified with the lower one under the
    periodic extension used by the Fourier operations.  The embedded domain
    must stay inside the box with a margin of at least two cells.
    """

    def __init__(self, dims, box_lo, box_hi, domain):
        dims = tuple(int(d) for d in np.asarray(dims).reshape(3))
        if any(d < 8 for d in dims):
            raise ValueError(f"grid dims must be >= 8 per axis, got {dims}")
        self.dims = dims
        self.box_lo = _freeze(_vec3(box_lo))
        self.box_hi = _freeze(_vec3(box_hi))
        if not np.all(self.box_hi > self.box_lo):
            raise ValueError("grid box must have hi > lo")
        self.domain = domain
        self.spacing = _freeze((self.box_hi - self.box_lo) / np.array(dims))
        self._check_margin()

    def _check_margin(self):
        margin = 2.0 * np.max(self.spacing)
        if isinstance(self.domain, Ball):
            lo_gap = self.domain.center - self.domain.radius - self.box_lo
            hi_gap = self.box_hi - (self.domain.center + self.domain.radius)
        elif isinstance(self.domain, BoxDomain):
            lo_gap = self.domain.lo - self.box_lo
            hi_gap = self.box_hi - self.domain.hi
        else:
            raise TypeError(f"unsupported domain shape {type(self.domain)!r}")
        if np.min(lo_gap) < margin or np.min(hi_gap) < margin:
            raise ValueError(
                "domain must sit inside the grid box with a margin of at "
                f"least two cells ({margin:.3g})"
            )

    # -- geometry -----------------------------------------------------------

    @cached_property
    def axes(self):
        return tuple(
            _freeze(self.box_lo[a] + self.spacing[a] * np.arange(self.dims[a]))
            for a in range(3)
        )

    @cached_property
    def mesh(self) -> np.ndarray:
        """Node coordinates, shape (3, n1, n2, n3)."""
        X = np.meshgrid(*self.axes, indexing="ij")
        return _freeze(np.stack(X))

    @cached_property
    def interior_mask(self) -> np.ndarray:
        pts = np.moveaxis(self.mesh, 0, -1)
        return _freeze(self.domain.sdf(pts) < 0.0)

    @cached_property
    def boundary(self) -> "BoundaryGeometry":
        return BoundaryGeometry(self)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def box_lengths(self) -> np.ndarray:
        return self.box_hi - self.box_lo

    @cached_property
    def wavenumbers(self):
        """Angular lattice frequencies per axis (FFT ordering)."""
        return tuple(
            _freeze(2.0 * np.pi * np.fft.fftfreq(self.dims[a], d=self.spacing[a]))
            for a in range(3)
        )

    def same_as(self, other: "Grid") -> bool:
        return (
            self.dims == other.dims
            and np.array_equal(self.box_lo, other.box_lo)
            and np.array_equal(self.box_hi, other.box_hi)
        )

    def __repr__(self):
        return f"Grid(dims={self.dims}, box=[{self.box_lo}, {self.box_hi}], domain={self.domain})"


class BoundaryGeometry:
    """Staircase discretization of the embedded domain boundary.

    Boundary nodes are the exterior grid nodes 6-adjacent to an interior
    node.  The geometry also records, per axis, the interface and interior
    faces needed by the conservative solvers and the energy pairings.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        interior = grid.interior_mask
        n1, n2, n3 = grid.dims

        ghost = np.zeros_like(interior)
        for a in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            ghost[lo] |= interior[hi]
            ghost[hi] |= interior[lo]
        ghost &= ~interior
        self.ghost_mask = _freeze(ghost)
        self.known_mask = _freeze(interior | ghost)

        if interior[0, :, :].any() or interior[-1, :, :].any() \
                or interior[:, 0, :].any() or interior[:, -1, :].any() \
                or interior[:, :, 0].any() or interior[:, :, -1].any():
            raise ValueError("embedded domain touches the grid box faces")

        self.node_index = np.argwhere(ghost)
        self.n_nodes = len(self.node_index)
        coords = grid.box_lo + self.node_index * grid.spacing
        self.coords = _freeze(coords)
        self.normals = _freeze(grid.domain.normal(coords))

        # Linear index of each ghost node into a flat (n1*n2*n3) array.
        self.flat_index = _freeze(np.ravel_multi_index(self.node_index.T, grid.dims))

        # Faces between node i and node i+1 along each axis.  A face is
        # "active" when it joins two known nodes and at least one endpoint is
        # interior; these are the faces that carry flux in the solvers.
        self.face_active = []
        self.face_interface = []   # interior <-> ghost faces
        vec_area = np.zeros((self.n_nodes, 3))
        proj_area = np.zeros(self.n_nodes)
        ghost_id = -np.ones(grid.dims, dtype=np.int64)
        ghost_id[ghost] = np.arange(self.n_nodes)
        h = grid.spacing
        is_ball = isinstance(grid.domain, Ball)
        for a in range(3):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            i_lo, i_hi = interior[lo], interior[hi]
            g_lo, g_hi = ghost[lo], ghost[hi]
            active = (i_lo & i_hi) | (i_lo & g_hi) | (g_lo & i_hi)
            self.face_active.append(_freeze(active))
            self.face_interface.append(_freeze((i_lo & g_hi) | (g_lo & i_hi)))
            face_area = h[(a + 1) % 3] * h[(a + 2) % 3]
            for side, gid_src, mask in (
                (+1.0, hi, i_lo & g_hi),
                (-1.0, lo, g_lo & i_hi),
            ):
                gid = ghost_id[gid_src][mask]
                np.add.at(vec_area[:, a], gid, side * face_area)
                # Face centers, for the radial projection of each face patch
                # onto the sphere (exact solid-angle quadrature weights).
                fidx = np.argwhere(mask).astype(float)
                fidx[:, a] += 0.5
                c = grid.box_lo + fidx * h
                if is_ball:
                    d = c - grid.domain.center
                    r2 = np.sum(d * d, axis=1)
                    cosang = side * d[:, a] / np.sqrt(r2)
                    w = face_area * cosang * grid.domain.radius ** 2 / r2
                else:
                    cosang = side * grid.domain.normal(c)[:, a]
                    w = face_area * cosang
                np.add.at(proj_area, gid, w)
        self.ghost_id = _freeze(ghost_id)
        self.vector_areas = _freeze(vec_area)

        if np.any(proj_area <= 0.0):
            raise ValueError("non-positive boundary quadrature weight")
        self.areas = _freeze(proj_area)

        norms = np.linalg.norm(self.normals, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("boundary normals are not unit vectors")

    @cached_property
    def gradient_matrices(self) -> tuple:
        """Sparse per-axis gradient operators on the known region.

        Rows at interior nodes are centered differences; rows at boundary
        nodes follow the availability branches of :func:`ghost_gradient`
        (centered, then one-sided 3-point inward, then 2-point); rows at
        exterior nodes are zero.  All branches are exact on linear fields.
        """
        import scipy.sparse as sp

        grid = self.grid
        dims = np.array(grid.dims)
        N = int(np.prod(dims))
        h = grid.spacing
        known_flat = self.known_mask.reshape(-1)
        nodes = np.argwhere(self.known_mask)
        base = np.ravel_multi_index(nodes.T, grid.dims)
        strides = np.array([grid.dims[1] * grid.dims[2], grid.dims[2], 1])
        mats = []
        for a in range(3):
            st = strides[a]

            def neighbor(step):
                pos = nodes[:, a] + step
                ok = (pos >= 0) & (pos < dims[a])
                j = np.clip(base + step * st, 0, N - 1)
                return j, ok & known_flat[j]

            jp1, okp1 = neighbor(+1)
            jp2, okp2 = neighbor(+2)
            jm1, okm1 = neighbor(-1)
            jm2, okm2 = neighbor(-2)
            branch = np.select(
                [okp1 & okm1, okp1 & okp2, okm1 & okm2, okp1, okm1],
                [0, 1, 2, 3, 4], default=5)
            rows, cols, vals = [], [], []

            def put(sel, j, w):
                rows.append(base[sel])
                cols.append(j[sel])
                vals.append(np.full(int(sel.sum()), w))

            c = branch == 0
            put(c, jp1, 0.5 / h[a]); put(c, jm1, -0.5 / h[a])
            f = branch == 1
            put(f, base, -1.5 / h[a]); put(f, jp1, 2.0 / h[a]); put(f, jp2, -0.5 / h[a])
            bb = branch == 2
            put(bb, base, 1.5 / h[a]); put(bb, jm1, -2.0 / h[a]); put(bb, jm2, 0.5 / h[a])
            f2 = branch == 3
            put(f2, jp1, 1.0 / h[a]); put(f2, base, -1.0 / h[a])
            b2 = branch == 4
            put(b2, base, 1.0 / h[a]); put(b2, jm1, -1.0 / h[a])
            M = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(N, N))
            mats.append(M)
        return tuple(mats)

    def values_at_nodes(self, grid_values: np.ndarray) -> np.ndarray:
        return grid_values.reshape(-1)[self.flat_index]

    def scatter(self, trace_values: np.ndarray, fill=0.0) -> np.ndarray:
        """Full-grid array with the trace on the ghost ring, `fill` elsewhere."""
        out = np.full(self.grid.dims, fill, dtype=np.asarray(trace_values).dtype)
        out.reshape(-1)[self.flat_index] = trace_values
        return out


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def _check_values(grid, values, shape_tail, dtype, finite=True):
    values = np.asarray(values, dtype=dtype)
    want = grid.dims + shape_tail
    if values.shape != want:
        raise ValueError(f"field values have shape {values.shape}, expected {want}")
    if finite and not np.all(np.isfinite(values)):
        raise ValueError("field values must be finite")
    return _freeze(values)


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, (), float))

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "ScalarField":
        X = grid.mesh
        return cls(grid, np.asarray(fn(X[0], X[1], X[2]), dtype=float))

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "ScalarField":
        return cls(grid, np.full(grid.dims, float(value)))


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: np.ndarray       # shape dims + (3,)

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, (3,), float))

    @classmethod
    def from_components(cls, grid: Grid, vx, vy, vz) -> "VectorField":
        return cls(grid, np.stack([vx, vy, vz], axis=-1))

    def component(self, a: int) -> np.ndarray:
        return self.values[..., a]


@dataclass(frozen=True)
class ComplexScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.grid, self.values, (), complex))


@dataclass(frozen=True)
class BoundaryTrace:
    """Sampled values on the boundary nodes of the discretized domain."""

    grid: Grid
    samples: np.ndarray

    def __post_init__(self):
        geo = self.grid.boundary
        samples = np.asarray(self.samples)
        if samples.dtype.kind not in "fc":
            samples = samples.astype(float)
        if samples.shape != (geo.n_nodes,):
            raise ValueError(
                f"trace has {samples.shape} samples, expected ({geo.n_nodes},)"
            )
        if not np.all(np.isfinite(samples)):
            raise ValueError("trace samples must be finite")
        object.__setattr__(self, "samples", _freeze(samples))

    @property
    def geometry(self) -> BoundaryGeometry:
        return self.grid.boundary

    @property
    def normals(self) -> np.ndarray:
        return self.grid.boundary.normals

    @property
    def areas(self) -> np.ndarray:
        return self.grid.boundary.areas

    @classmethod
    def from_function(cls, grid: Grid, fn) -> "BoundaryTrace":
        p = grid.boundary.coords
        return cls(grid, np.asarray(fn(p[:, 0], p[:, 1], p[:, 2])))

    def __add__(self, other):
        return BoundaryTrace(self.grid, self.samples + other.samples)

    def __sub__(self, other):
        return BoundaryTrace(self.grid, self.samples - other.samples)

    def __mul__(self, c):
        return BoundaryTrace(self.grid, self.samples * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class FrequencyGrid:
    """Symmetric lattice of spatial frequencies with |xi| <= xi_max."""

    xi_points: np.ndarray       # (K, 3)
    xi_max: float
    lattice_index: np.ndarray = field(default=None, repr=False)  # (K, 3) ints

    def __post_init__(self):
        pts = np.asarray(self.xi_points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("xi_points must have shape (K, 3)")
        r = np.linalg.norm(pts, axis=1)
        if np.any(r > self.xi_max + 1e-12):
            raise ValueError("frequency point outside the cutoff radius")
        # Closure under negation.
        key = {tuple(np.round(p, 12)) for p in pts}
        for p in pts:
            if tuple(np.round(-p, 12)) not in key:
                raise ValueError("frequency lattice is not symmetric under negation")
        object.__setattr__(self, "xi_points", _freeze(pts))
        if self.lattice_index is not None:
            object.__setattr__(self, "lattice_index", _freeze(np.asarray(self.lattice_index, dtype=np.int64)))

    def __len__(self):
        return len(self.xi_points)


def make_frequency_grid(grid: Grid, xi_max: float) -> FrequencyGrid:
    """Integer lattice scaled to the box, truncated at |xi| <= xi_max."""
    base = 2.0 * np.pi / grid.box_lengths
    m_max = np.floor(xi_max / base).astype(int)
    rng = [np.arange(-m, m + 1) for m in m_max]
    M = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    xi = M * base
    keep = np.linalg.norm(xi, axis=1) <= xi_max + 1e-12
    M, xi = M[keep], xi[keep]
    order = np.lexsort((M[:, 2], M[:, 1], M[:, 0], np.einsum("ij,ij->i", xi, xi)))
    return FrequencyGrid(xi[order], float(xi_max), lattice_index=M[order])


# ---------------------------------------------------------------------------
# differential operators
# ---------------------------------------------------------------------------

def gradient(f: ScalarField) -> VectorField:
    """Second-order gradient: centered inside, one-sided at the box faces."""
    g = np.gradient(f.values, *f.grid.spacing, edge_order=2)
    return VectorField(f.grid, np.stack(g, axis=-1))


def divergence(F: VectorField) -> ScalarField:
    """Second-order divergence, the negative adjoint of :func:`gradient` on
    fields supported away from the box faces."""
    h = F.grid.spacing
    out = np.zeros(F.grid.dims)
    for a in range(3):
        out += np.gradient(F.values[..., a], h[a], axis=a, edge_order=2)
    return ScalarField(F.grid, out)


def gradient_arr(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Gradient of a raw array, returned with a trailing component axis."""
    g = np.gradient(values, *grid.spacing, edge_order=2)
    return np.stack(g, axis=-1)


def laplacian_7pt(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Standard 7-point Laplacian with one-sided copies at the box faces.

    Matches the operator used by the embedded Dirichlet solvers; values at
    the box faces are second-order one-sided and never used by the solvers.
    """
    out = np.zeros_like(values)
    h = grid.spacing
    for a in range(3):
        d2 = np.zeros_like(values)
        sl = [slice(None)] * 3

        def ax(s):
            t = list(sl)
            t[a] = s
            return tuple(t)

        d2[ax(slice(1, -1))] = (
            values[ax(slice(2, None))] - 2.0 * values[ax(slice(1, -1))]
            + values[ax(slice(None, -2))]
        )
        # One-sided second difference at the box faces (order h).
        d2[ax(0)] = values[ax(2)] - 2.0 * values[ax(1)] + values[ax(0)]
        d2[ax(-1)] = values[ax(-1)] - 2.0 * values[ax(-2)] + values[ax(-3)]
        out += d2 / h[a] ** 2
    return out


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

def _complex_values(f) -> np.ndarray:
    if isinstance(f, ComplexScalarField):
        return f.values
    if isinstance(f, ScalarField):
        return f.values.astype(complex)
    raise TypeError("expected a scalar or complex scalar field")


def fourier_forward(f) -> ComplexScalarField:
    """Unitary DFT of a field under periodic extension of the grid box."""
    grid = f.grid
    return ComplexScalarField(grid, np.fft.fftn(_complex_values(f), norm="ortho"))


def fourier_inverse(f) -> ComplexScalarField:
    grid = f.grid
    return ComplexScalarField(grid, np.fft.ifftn(_complex_values(f), norm="ortho"))


def fourier_coefficients(f) -> np.ndarray:
    """Continuum-normalized coefficients q_hat(xi_m) = integral q e^{-i xi x} dx.

    Returned in FFT ordering on the full lattice (box Fourier series).
    """
    grid = f.grid
    vals = _complex_values(f)
    coeff = np.fft.fftn(vals) * grid.cell_volume
    phase = [np.exp(-1j * grid.wavenumbers[a] * grid.box_lo[a]) for a in range(3)]
    return coeff * phase[0][:, None, None] * phase[1][None, :, None] * phase[2][None, None, :]

def field_from_coefficients(grid: Grid, coeff: np.ndarray) -> ComplexScalarField:
    """Inverse of :func:`fourier_coefficients`."""
    phase = [np.exp(1j * grid.wavenumbers[a] * grid.box_lo[a]) for a in range(3)]
    vals = np.fft.ifftn(coeff * phase[0][:, None, None] * phase[1][None, :, None]
                        * phase[2][None, None, :]) / grid.cell_volume
    return ComplexScalarField(grid, vals)


def coefficients_at(coeff: np.ndarray, freq: FrequencyGrid) -> np.ndarray:
    """Pick lattice coefficients at the points of a FrequencyGrid."""
    if freq.lattice_index is None:
        raise ValueError("frequency grid lacks lattice indices")
    idx = freq.lattice_index
    return coeff[tuple((idx % np.array(coeff.shape)).T)]


# ---------------------------------------------------------------------------
# boundary restriction and quadrature
# ---------------------------------------------------------------------------

def boundary_restrict(f) -> BoundaryTrace:
    """Sample a grid field at the boundary nodes."""
    if isinstance(f, (ScalarField, ComplexScalarField)):
        geo = f.grid.boundary
        return BoundaryTrace(f.grid, geo.values_at_nodes(f.values))
    raise TypeError("boundary_restrict expects a scalar or complex scalar field")


def boundary_integral(g: BoundaryTrace, w: BoundaryTrace):
    """Quadrature-weighted surface integral of the product g*w."""
    if not g.grid.same_as(w.grid):
        raise ValueError("traces live on different grids")
    s = np.sum(g.samples * w.samples * g.areas)
    return complex(s) if np.iscomplexobj(s) else float(s)


def boundary_flux_integral(grid: Grid, F: VectorField, w: BoundaryTrace):
    """Integral of (nu . F) w over the staircase boundary via vector areas."""
    geo = grid.boundary
    Fb = F.values.reshape(-1, 3)[geo.flat_index]
    return float(np.sum(np.einsum("ij,ij->i", Fb, geo.vector_areas) * w.samples))


def interior_integral(grid: Grid, values: np.ndarray):
    """Volume integral over the embedded domain (node-based Riemann sum)."""
    s = np.sum(values[grid.interior_mask]) * grid.cell_volume
    return complex(s) if np.iscomplexobj(values) else float(s)


def interior_l2(grid: Grid, values: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.abs(values[grid.interior_mask]) ** 2) * grid.cell_volume))


# ---------------------------------------------------------------------------
# pointwise gradients on the ghost ring
# ---------------------------------------------------------------------------

def ghost_gradient(grid: Grid, values: np.ndarray) -> np.ndarray:
    """Gradient at each boundary node from interior/ghost values only.

    Uses centered differences where both axis neighbors carry values, else a
    second-order one-sided stencil into the domain, else a two-point fall
    back.  All branches are exact for globally linear fields.
    """
    geo = grid.boundary
    known = geo.known_mask
    h = grid.spacing
    dims = np.array(grid.dims)
    idx = geo.node_index
    flat_vals = values.reshape(-1)
    flat_known = known.reshape(-1)
    out = np.zeros((geo.n_nodes, 3), dtype=values.dtype)

    def flat_at(offset_axis, step):
        j = idx.copy()
        j[:, offset_axis] = j[:, offset_axis] + step
        valid = (j[:, offset_axis] >= 0) & (j[:, offset_axis] < dims[offset_axis])
        jc = np.clip(j, 0, dims - 1)
        f = np.ravel_multi_index(jc.T, grid.dims)
        val = flat_vals[f]
        ok = valid & flat_known[f]
        return np.where(ok, val, 0.0), ok

    v0 = flat_vals[geo.flat_index]
    for a in range(3):
        vp1, okp1 = flat_at(a, +1)
        vp2, okp2 = flat_at(a, +2)
        vm1, okm1 = flat_at(a, -1)
        vm2, okm2 = flat_at(a, -2)
        centered = (vp1 - vm1) / (2 * h[a])
        fwd3 = (-3 * v0 + 4 * vp1 - vp2) / (2 * h[a])
        bwd3 = (3 * v0 - 4 * vm1 + vm2) / (2 * h[a])
        fwd2 = (vp1 - v0) / h[a]
        bwd2 = (v0 - vm1) / h[a]
        grad_a = np.select(
            [okp1 & okm1, okp1 & okp2, okm1 & okm2, okp1, okm1],
            [centered, fwd3, bwd3, fwd2, bwd2],
            default=0.0,
        )
        out[:, a] = grad_a
    return out
