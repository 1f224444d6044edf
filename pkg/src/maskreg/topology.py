"""Local receptive field masks.

A topology lists, for every output pixel (row-major), the sorted input-pixel
indices (row-major, 0-based) that the pixel is allowed to observe. A bias slot
is always present and is kept implicit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import GeometryError

__all__ = [
    "RfGeometry",
    "Topology",
    "build_topology",
    "total_parameters",
    "dense_mask",
    "format_mask",
]


@dataclass(frozen=True)
class RfGeometry:
    """Image sizes and receptive-field shape.

    Parameters
    ----------
    in_height, in_width : int
        Input image size in pixels.
    out_height, out_width : int
        Output image size in pixels.
    taps_per_side : int
        Odd number of taps along each side of the field (``r`` of an r x r field).
    dilation : int
        Spacing between neighbouring taps. 1 gives a contiguous window.
    """

    in_height: int
    in_width: int
    out_height: int
    out_width: int
    taps_per_side: int = 3
    dilation: int = 1

    def __post_init__(self):
        for name in ("in_height", "in_width", "out_height", "out_width"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise GeometryError(f"{name} must be a positive integer, got {v!r}")
        r = self.taps_per_side
        if int(r) != r or r < 1 or r % 2 == 0:
            raise GeometryError(f"taps_per_side must be an odd integer >= 1, got {r!r}")
        if int(self.dilation) != self.dilation or self.dilation < 1:
            raise GeometryError(f"dilation must be an integer >= 1, got {self.dilation!r}")

    @classmethod
    def square(cls, size: int, taps_per_side: int = 3, dilation: int = 1) -> "RfGeometry":
        return cls(size, size, size, size, taps_per_side, dilation)

    @property
    def n_inputs(self) -> int:
        return self.in_height * self.in_width

    @property
    def n_outputs(self) -> int:
        return self.out_height * self.out_width

    @property
    def half_width(self) -> int:
        return (self.taps_per_side - 1) // 2


class Topology:
    """Immutable receptive-field index sets, stored in CSR layout.

    ``indptr[k]:indptr[k+1]`` slices ``indices`` to the inputs of output pixel k.
    """

    has_bias = True

    def __init__(self, geometry: RfGeometry, indptr: np.ndarray, indices: np.ndarray):
        self.geometry = geometry
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.indptr.flags.writeable = False
        self.indices.flags.writeable = False
        if len(self.indptr) != geometry.n_outputs + 1:
            raise GeometryError("indptr length does not match the number of output pixels")

    def __len__(self) -> int:
        return self.geometry.n_outputs

    def __getitem__(self, k: int) -> np.ndarray:
        return self.indices[self.indptr[k]:self.indptr[k + 1]]

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (self.geometry == other.geometry
                and np.array_equal(self.indptr, other.indptr)
                and np.array_equal(self.indices, other.indices))

    def __repr__(self):
        return f"Topology({self.geometry}, weights={len(self.indices)})"

    @property
    def rows(self) -> list[np.ndarray]:
        return [self[k] for k in range(len(self))]

    @cached_property
    def row_sizes(self) -> np.ndarray:
        return np.diff(self.indptr)

    @property
    def n_weights(self) -> int:
        return int(self.indptr[-1])


def build_topology(geometry: RfGeometry) -> Topology:
    """Build the receptive-field index sets for every output pixel.

    Output pixel (i, j) observes input pixels ``(i + a*d, j + b*d)`` for
    ``a, b`` in ``-h..h``. Taps falling outside the input image are dropped.
    """
    g = geometry
    h, d = g.half_width, g.dilation
    offsets = np.arange(-h, h + 1) * d
    oi, oj = np.meshgrid(np.arange(g.out_height), np.arange(g.out_width), indexing="ij")
    # (K, r) row and column tap coordinates
    ti = oi.reshape(-1, 1) + offsets
    tj = oj.reshape(-1, 1) + offsets
    ok_i = (ti >= 0) & (ti < g.in_height)
    ok_j = (tj >= 0) & (tj < g.in_width)
    # (K, r, r): a row-major scan over (a, b) is already increasing in flat index
    flat = ti[:, :, None] * g.in_width + tj[:, None, :]
    valid = ok_i[:, :, None] & ok_j[:, None, :]
    counts = valid.reshape(len(flat), -1).sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    indices = flat[valid]
    return Topology(g, indptr, indices)


def total_parameters(topology: Topology) -> int:
    """Number of learnable weights plus one bias per output pixel."""
    return topology.n_weights + (len(topology) if topology.has_bias else 0)


def dense_mask(topology: Topology, with_bias: bool = False) -> np.ndarray:
    """Materialize the K x D (or K x (D+1)) 0/1 mask matrix."""
    g = topology.geometry
    M = np.zeros((g.n_outputs, g.n_inputs + int(with_bias)), dtype=np.int8)
    rows = np.repeat(np.arange(g.n_outputs), topology.row_sizes)
    M[rows, topology.indices] = 1
    if with_bias:
        M[:, -1] = 1
    return M


def format_mask(topology: Topology) -> str:
    """Render the mask as text with 1-based indices and blanks for zeros."""
    M = dense_mask(topology)
    K, D = M.shape
    cw = len(str(D))
    rw = len(str(K))
    header = " " * rw + " |" + "".join(f" {j:>{cw}}" for j in range(1, D + 1))
    lines = [header, "-" * (rw + 1) + "+" + "-" * (len(header) - rw - 2)]
    for k in range(K):
        cells = "".join(f" {'1' if v else '':>{cw}}" for v in M[k])
        lines.append(f"{k + 1:>{rw}} |{cells}".rstrip())
    return "\n".join(lines)
