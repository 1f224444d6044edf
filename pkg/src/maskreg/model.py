"""Learned sparse-row mappings: synthesis, persistence, introspection."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import ImageBuffer, Strategy
from .errors import DataError, ModelFormatError
from .topology import RfGeometry, Topology

__all__ = [
    "Mapping",
    "SparseRowModel",
    "synthesize",
    "weight_only_synthesize",
    "relative_importance",
    "count_nonzeros",
    "save",
    "load",
    "MAGIC",
    "VERSION",
]

MAGIC = b"LRFM"
VERSION = 1
_HEADER = struct.Struct("<4sHB6H")


@dataclass(frozen=True, eq=False)
class Mapping:
    """One affine map from D input pixels to K output pixels, CSR rows plus bias."""

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    n_inputs: int

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.asarray(self.indptr, dtype=np.int64))
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))
        if len(self.indices) != len(self.weights):
            raise DataError("index and weight lists differ in length")
        if len(self.indptr) != len(self.bias) + 1 or self.indptr[-1] != len(self.indices):
            raise DataError("inconsistent row pointers")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= self.n_inputs):
            raise DataError(f"mapping index out of range for {self.n_inputs} inputs")
        for a in (self.indptr, self.indices, self.weights, self.bias):
            a.flags.writeable = False

    @classmethod
    def from_dense(cls, W: np.ndarray, b: np.ndarray, keep_zeros: bool = True) -> "Mapping":
        W = np.asarray(W, dtype=np.float64)
        mask = np.ones(W.shape, bool) if keep_zeros else W != 0
        counts = mask.sum(axis=1)
        rows, cols = np.nonzero(mask)
        return cls(np.concatenate([[0], np.cumsum(counts)]), cols, W[rows, cols], b, W.shape[1])

    @classmethod
    def from_topology(cls, topology: Topology, weights, bias) -> "Mapping":
        return cls(topology.indptr, topology.indices, weights, bias, topology.geometry.n_inputs)

    @property
    def n_rows(self) -> int:
        return len(self.bias)

    def row(self, k: int) -> tuple[np.ndarray, np.ndarray, float]:
        s = slice(self.indptr[k], self.indptr[k + 1])
        return self.indices[s], self.weights[s], float(self.bias[k])

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, self.indices, self.indptr),
                             shape=(self.n_rows, self.n_inputs))

    def dense(self) -> np.ndarray:
        W = np.zeros((self.n_rows, self.n_inputs))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        W[rows, self.indices] = self.weights
        return W

    def apply(self, x: np.ndarray, with_bias: bool = True) -> np.ndarray:
        """Raw outputs for flattened inputs ``x`` of shape (D,) or (n, D)."""
        y = (self.matrix @ np.asarray(x, dtype=np.float64).T).T
        return y + self.bias if with_bias else y

    def row_l1(self) -> np.ndarray:
        """Per-row sum of absolute weights plus absolute bias."""
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        return np.bincount(rows, np.abs(self.weights), self.n_rows) + np.abs(self.bias)

    def equals(self, other: "Mapping") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.indptr, self.indices, self.weights, self.bias),
            (other.indptr, other.indices, other.weights, other.bias)))


@dataclass(frozen=True, eq=False)
class SparseRowModel:
    """A trained mapping (one per channel for the per-channel strategy)."""

    geometry: RfGeometry
    strategy: Strategy
    mappings: tuple[Mapping, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "mappings", tuple(self.mappings))
        if len(self.mappings) != self.strategy.n_mappings:
            raise DataError(f"strategy {self.strategy.value!r} needs {self.strategy.n_mappings} "
                            f"mapping(s), got {len(self.mappings)}")
        K, D = self.geometry.n_outputs, self.geometry.n_inputs
        for m in self.mappings:
            if m.n_rows != K or m.n_inputs != D:
                raise DataError(f"mapping is {m.n_rows}x{m.n_inputs}, geometry needs {K}x{D}")

    @property
    def n_outputs(self) -> int:
        return self.geometry.n_outputs

    @property
    def n_parameters(self) -> int:
        return sum(len(m.weights) + m.n_rows for m in self.mappings)

    def mapping_for_channel(self, c: int) -> Mapping:
        return self.mappings[c] if len(self.mappings) > 1 else self.mappings[0]

    def equals(self, other: "SparseRowModel") -> bool:
        return (self.geometry == other.geometry and self.strategy == other.strategy
                and len(self.mappings) == len(other.mappings)
                and all(a.equals(b) for a, b in zip(self.mappings, other.mappings)))


def _check_image(model: SparseRowModel, image: ImageBuffer) -> None:
    g = model.geometry
    if (image.height, image.width) != (g.in_height, g.in_width):
        raise DataError(f"image is {image.height}x{image.width}, model expects "
                        f"{g.in_height}x{g.in_width}")
    if model.strategy is Strategy.GRAY and image.channels != 1:
        raise DataError("gray model needs a 1-channel image")
    if model.strategy is Strategy.PER_CHANNEL and image.channels != 3:
        raise DataError("per-channel model needs a 3-channel image")


def synthesize_raw(model: SparseRowModel, image: ImageBuffer, with_bias: bool = True) -> np.ndarray:
    """Unclamped (C, H_out, W_out) prediction."""
    _check_image(model, image)
    g = model.geometry
    out = np.empty((image.channels, g.out_height, g.out_width))
    for c in range(image.channels):
        y = model.mapping_for_channel(c).apply(image.data[c].ravel(), with_bias)
        out[c] = y.reshape(g.out_height, g.out_width)
    return out


def synthesize(model: SparseRowModel, image: ImageBuffer, clamp: bool = True) -> ImageBuffer:
    """Apply ``y = W x + b`` per channel; clamp to [0, 1] unless ``clamp=False``."""
    y = synthesize_raw(model, image)
    return ImageBuffer(np.clip(y, 0.0, 1.0) if clamp else y)


def weight_only_synthesize(model: SparseRowModel, image: ImageBuffer, clamp: bool = True) -> ImageBuffer:
    """As :func:`synthesize` with every bias forced to zero."""
    y = synthesize_raw(model, image, with_bias=False)
    return ImageBuffer(np.clip(y, 0.0, 1.0) if clamp else y)


def relative_importance(model: SparseRowModel, images: Sequence[ImageBuffer]) -> tuple[float, float, float]:
    """Mean ``|Wx|`` over pixels and images, mean ``|b|``, and their ratio."""
    if not images:
        raise DataError("relative_importance needs at least one image")
    wx = np.mean([np.abs(synthesize_raw(model, im, with_bias=False)).mean() for im in images])
    b = np.mean([np.abs(m.bias).mean() for m in model.mappings])
    ratio = wx / b if b > 0 else np.inf
    return float(wx), float(b), float(ratio)


def count_nonzeros(model: SparseRowModel, tolerance: float = 0.0) -> int:
    """Stored weights and biases with magnitude above ``tolerance``."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    return int(sum(np.count_nonzero(np.abs(m.weights) > tolerance)
                   + np.count_nonzero(np.abs(m.bias) > tolerance) for m in model.mappings))


# Binary format ---------------------------------------------------------------

def to_bytes(model: SparseRowModel) -> bytes:
    g = model.geometry
    dims = (g.in_height, g.in_width, g.out_height, g.out_width, g.taps_per_side, g.dilation)
    if max(dims) > 0xFFFF:
        raise DataError("geometry exceeds the 16-bit limits of the model format")
    parts = [_HEADER.pack(MAGIC, VERSION, model.strategy.code, *dims)]
    for m in model.mappings:
        counts = np.diff(m.indptr)
        for k in range(m.n_rows):
            s = slice(m.indptr[k], m.indptr[k + 1])
            parts.append(struct.pack("<I", counts[k]))
            parts.append(m.indices[s].astype("<u4").tobytes())
            parts.append(m.weights[s].astype("<f8").tobytes())
            parts.append(struct.pack("<d", m.bias[k]))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf: bytes) -> SparseRowModel:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise ModelFormatError("truncated header")
    _, version, code, ih, iw, oh, ow, taps, dil = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}, expected {VERSION}")
    try:
        strategy = Strategy.from_code(code)
        geometry = RfGeometry(ih, iw, oh, ow, taps, dil)
    except DataError as exc:
        raise ModelFormatError(f"bad header: {exc}") from exc
    K, D = geometry.n_outputs, geometry.n_inputs
    pos = _HEADER.size
    end = len(buf) - 4
    mappings = []
    for mi in range(strategy.n_mappings):
        indptr = [0]
        idx_parts, w_parts, bias = [], [], np.empty(K)
        for k in range(K):
            row = mi * K + k
            if pos + 4 > end:
                raise ModelFormatError(f"file truncated at row {row}")
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            need = n * 12 + 8
            if pos + need > end:
                raise ModelFormatError(f"file truncated at row {row}")
            idx = np.frombuffer(buf, "<u4", n, pos).astype(np.int64)
            pos += 4 * n
            w = np.frombuffer(buf, "<f8", n, pos).astype(np.float64)
            pos += 8 * n
            (bias[k],) = struct.unpack_from("<d", buf, pos)
            pos += 8
            if n and (idx.max() >= D or np.any(np.diff(idx) <= 0)):
                raise ModelFormatError(f"row {row}: indices out of range or unsorted (D={D})")
            idx_parts.append(idx)
            w_parts.append(w)
            indptr.append(indptr[-1] + n)
        mappings.append(Mapping(np.array(indptr), np.concatenate(idx_parts),
                                np.concatenate(w_parts), bias, D))
    if pos != end:
        raise ModelFormatError(f"{end - pos} unexpected trailing bytes before checksum")
    (crc,) = struct.unpack_from("<I", buf, end)
    if crc != zlib.crc32(buf[:end]):
        raise ModelFormatError("checksum mismatch")
    return SparseRowModel(geometry, strategy, mappings)


def save(model: SparseRowModel, path: str | os.PathLike) -> None:
    """Write ``model`` atomically (temporary file, then rename)."""
    data = to_bytes(model)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load(path: str | os.PathLike) -> SparseRowModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ModelFormatError(f"{path}: cannot read model ({exc})") from exc
    try:
        return from_bytes(buf)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
