"""Image pairs, splits, and design/response matrices."""

from __future__ import annotations

import csv
import enum
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ImageIOError

__all__ = [
    "Strategy",
    "ImageBuffer",
    "DesignSet",
    "SplitSpec",
    "load_image",
    "save_image",
    "load_manifest",
    "split",
    "build_design_set",
    "to_luma",
    "LUMA_WEIGHTS",
]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class Strategy(str, enum.Enum):
    """How colour channels are mapped. Values double as CLI spellings."""

    GRAY = "gray"
    PER_CHANNEL = "per-channel"
    REPLICATE_GRAY = "replicate-gray"
    JOINT_COLOR = "joint-color"

    @property
    def code(self) -> int:
        return list(Strategy).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Strategy":
        members = list(cls)
        if not 0 <= code < len(members):
            raise DataError(f"unknown strategy code {code}")
        return members[code]

    @property
    def n_mappings(self) -> int:
        return 3 if self is Strategy.PER_CHANNEL else 1


@dataclass(frozen=True)
class ImageBuffer:
    """A [0, 1] image stored channel-planar as a (C, H, W) float array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[0] not in (1, 3):
            raise DataError(f"image must be (C, H, W) with C in (1, 3), got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def clamped(self) -> "ImageBuffer":
        return ImageBuffer(np.clip(self.data, 0.0, 1.0))


def load_image(path: str | os.PathLike) -> ImageBuffer:
    """Read an 8-bit PNG/PGM/PPM as an ImageBuffer scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[None]
            elif mode in ("RGB", "P", "RGBA", "LA"):
                if mode == "LA":
                    arr = np.asarray(im.convert("L"), dtype=np.float64)[None]
                else:
                    arr = np.moveaxis(np.asarray(im.convert("RGB"), dtype=np.float64), -1, 0)
            else:
                raise ImageIOError(f"{path}: unsupported image mode {mode!r} (8-bit gray or RGB only)")
    except FileNotFoundError as exc:
        raise ImageIOError(f"{path}: no such file") from exc
    except OSError as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    return ImageBuffer(arr / 255.0)


def save_image(image: ImageBuffer, path: str | os.PathLike) -> None:
    """Write an image as 8-bit, clamping to [0, 1]. Format follows the suffix."""
    q = np.rint(np.clip(image.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(q[0], "L") if image.channels == 1 else Image.fromarray(np.moveaxis(q, 0, -1), "RGB")
    path = Path(path)
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageIOError(f"{path}: unsupported output format {path.suffix!r}")
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        pil.save(tmp, format=fmt)
        os.replace(tmp, path)
    except OSError as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def load_manifest(path: str | os.PathLike) -> list[tuple[ImageBuffer, ImageBuffer]]:
    """Load (input, target) pairs listed in a two-column CSV without header.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"{path}: manifest not found")
    base = path.parent
    pairs = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            a, b = (base / c.strip() for c in row)
            x, y = load_image(a), load_image(b)
            if x.shape != y.shape:
                raise DataError(
                    f"{path}:{lineno}: dimension mismatch between {a} {x.shape} and {b} {y.shape}"
                )
            pairs.append((x, y))
    return pairs


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be nonnegative and sum to 1, got {fr}")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SplitSpec":
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError as exc:
            raise DataError(f"bad split {text!r}") from exc
        if len(parts) != 3:
            raise DataError(f"split needs three comma-separated fractions, got {text!r}")
        return cls(*parts, seed=seed)

    def sizes(self, n: int) -> tuple[int, int, int]:
        # the epsilon keeps 0.1 * 10 from flooring to 0 through rounding noise
        n_val = math.floor(self.val_fraction * n + 1e-9)
        n_test = math.floor(self.test_fraction * n + 1e-9)
        return n - n_val - n_test, n_val, n_test


def split(pairs: Sequence, spec: SplitSpec) -> tuple[list, list, list]:
    """Seeded shuffle, then floor-allocate val/test; the remainder goes to train."""
    n_train, n_val, _ = spec.sizes(len(pairs))
    if n_train < 1:
        raise DataError(f"{len(pairs)} pairs leave no training data under {spec}")
    order = np.random.default_rng(spec.seed).permutation(len(pairs))
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([pairs[i] for i in p] for p in parts)


@dataclass(frozen=True)
class DesignSet:
    """Row-stacked design ``X`` (N x D) and response ``T`` (N x K) matrices.

    ``row_multiplicity`` is the number of rows each image pair contributes
    (C for joint colour, else 1); solvers scale their regularizer by it so a
    given lambda means the same thing under every strategy.
    """

    X: np.ndarray
    T: np.ndarray
    in_shape: tuple[int, int]
    out_shape: tuple[int, int]
    strategy: Strategy = Strategy.GRAY
    channels: int = 1
    row_multiplicity: int = 1

    def __post_init__(self):
        if self.X.shape[0] != self.T.shape[0]:
            raise DataError(f"X has {self.X.shape[0]} rows but T has {self.T.shape[0]}")
        if self.X.shape[1] != self.in_shape[0] * self.in_shape[1]:
            raise DataError("X width does not match the input image size")
        if self.T.shape[1] != self.out_shape[0] * self.out_shape[1]:
            raise DataError("T width does not match the output image size")
        self.X.flags.writeable = False
        self.T.flags.writeable = False

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.T.shape[1]

    @classmethod
    def from_arrays(cls, X, T, in_shape=None, out_shape=None) -> "DesignSet":
        """Wrap raw matrices; image shapes default to 1 x D and 1 x K."""
        X = np.array(X, dtype=np.float64, ndmin=2)
        T = np.array(T, dtype=np.float64, ndmin=2)
        return cls(X, T, in_shape or (1, X.shape[1]), out_shape or (1, T.shape[1]))


def to_luma(image: ImageBuffer) -> ImageBuffer:
    if image.channels == 1:
        return image
    w = np.asarray(LUMA_WEIGHTS).reshape(3, 1, 1)
    return ImageBuffer((image.data * w).sum(axis=0, keepdims=True))


def _stack(images: Sequence[ImageBuffer], channel: int) -> np.ndarray:
    return np.stack([im.data[channel].ravel() for im in images])


def build_design_set(pairs: Sequence[tuple[ImageBuffer, ImageBuffer]],
                     strategy: Strategy | str = Strategy.GRAY):
    """Assemble training matrices for a colour strategy.

    Returns a single DesignSet, except for ``per-channel`` which returns a
    list of three (one per channel).
    """
    strategy = Strategy(strategy)
    if not pairs:
        raise DataError("no image pairs")
    x0, y0 = pairs[0]
    for x, y in pairs:
        if x.shape != x0.shape or y.shape != y0.shape:
            raise DataError("all pairs must share input and target dimensions")
        if x.channels != y.channels:
            raise DataError("input and target channel counts differ")
    C = x0.channels
    in_shape, out_shape = (x0.height, x0.width), (y0.height, y0.width)
    xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]

    if strategy is Strategy.GRAY:
        if C != 1:
            raise DataError(f"strategy 'gray' needs 1-channel images, got {C}")
        return DesignSet(_stack(xs, 0), _stack(ys, 0), in_shape, out_shape, strategy, 1)
    if strategy is Strategy.REPLICATE_GRAY:
        if C != 3:
            raise DataError(f"strategy 'replicate-gray' needs 3-channel images, got {C}")
        lx, ly = [to_luma(x) for x in xs], [to_luma(y) for y in ys]
        return DesignSet(_stack(lx, 0), _stack(ly, 0), in_shape, out_shape, strategy, C)
    if strategy is Strategy.PER_CHANNEL:
        if C != 3:
            raise DataError(f"strategy 'per-channel' needs 3-channel images, got {C}")
        return [DesignSet(_stack(xs, c), _stack(ys, c), in_shape, out_shape, strategy, C)
                for c in range(C)]
    # joint colour: all pairs' channel 0 rows, then channel 1, ...
    X = np.concatenate([_stack(xs, c) for c in range(C)])
    T = np.concatenate([_stack(ys, c) for c in range(C)])
    return DesignSet(X, T, in_shape, out_shape, strategy, C, row_multiplicity=C)
