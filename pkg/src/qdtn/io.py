"""Binary field dumps.

Format "QDTN1": magic b"QDTN1", 3 x uint32 dims, 6 x float64 box corners
(lo then hi), uint8 kind (0 real, 1 complex, 2 vector3), then little-endian
float64 payload in row-major order with the first axis fastest.  Complex
fields store (re, im) pairs per node, vector fields (vx, vy, vz) triples.
"""

from __future__ import annotations

import struct

import numpy as np

from .grid_core import Ball, ComplexScalarField, Grid, ScalarField, VectorField

MAGIC = b"QDTN1"
KIND_REAL, KIND_COMPLEX, KIND_VECTOR3 = 0, 1, 2

_HEADER = struct.Struct("<5s3I6dB")


def _payload(field) -> tuple[int, np.ndarray]:
    if isinstance(field, ScalarField):
        return KIND_REAL, field.values[..., None]
    if isinstance(field, ComplexScalarField):
        return KIND_COMPLEX, np.stack([field.values.real, field.values.imag], axis=-1)
    if isinstance(field, VectorField):
        return KIND_VECTOR3, field.values
    raise TypeError(f"cannot dump object of type {type(field)!r}")


def write_field(path, field) -> None:
    kind, data = _payload(field)
    grid = field.grid
    header = _HEADER.pack(
        MAGIC, *grid.dims,
        *grid.box_lo.tolist(), *grid.box_hi.tolist(),
        kind,
    )
    # x fastest: transpose the grid axes before flattening in C order.
    flat = np.ascontiguousarray(data.transpose(2, 1, 0, 3), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flat.tobytes())


def read_field(path, domain=None):
    """Read a dump.  A domain shape may be supplied for the reconstructed
    grid; the default is a unit ball at the origin."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, n1, n2, n3, *rest = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        box = np.array(rest[:6])
        kind = rest[6]
        raw = np.frombuffer(fh.read(), dtype="<f8")
    dims = (n1, n2, n3)
    if domain is None:
        domain = Ball(center=(0.0, 0.0, 0.0), radius=1.0)
    grid = Grid(dims, box[:3], box[3:], domain)
    comps = {KIND_REAL: 1, KIND_COMPLEX: 2, KIND_VECTOR3: 3}[kind]
    data = raw.reshape(n3, n2, n1, comps).transpose(2, 1, 0, 3)
    if kind == KIND_REAL:
        return ScalarField(grid, data[..., 0])
    if kind == KIND_COMPLEX:
        return ComplexScalarField(grid, data[..., 0] + 1j * data[..., 1])
    return VectorField(grid, data)
