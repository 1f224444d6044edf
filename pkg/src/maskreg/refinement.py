"""Blur refinement: blend the input back in where the mapping is unremarkable.

Output pixels whose receptive fields look like the average field contribute
little to the expression change, so the refined image copies the (sharper)
input there and keeps the synthesized output elsewhere.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import ImageBuffer
from .errors import DataError
from .model import SparseRowModel

__all__ = ["AlphaParams", "AlphaMap", "compute_alpha", "refine", "disk", "minmax_rescale"]


@dataclass(frozen=True)
class AlphaParams:
    """Alpha-map settings. ``None`` radius/sigma adapt to the image size."""

    steepness: float = 10.0
    threshold: float = 0.2
    dilation_radius: int | None = None
    gaussian_sigma: float | None = None

    def __post_init__(self):
        if not self.steepness > 0:
            raise ValueError("steepness must be > 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.dilation_radius is not None and self.dilation_radius < 1:
            raise ValueError("dilation_radius must be >= 1")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be > 0")

    def resolved(self, height: int, width: int) -> "AlphaParams":
        short = min(height, width)
        radius = self.dilation_radius
        if radius is None:
            radius = max(1, int(round(0.03 * short)))
        sigma = self.gaussian_sigma
        if sigma is None:
            sigma = max(0.5, 0.02 * short)
        return AlphaParams(self.steepness, self.threshold, radius, sigma)


@dataclass(frozen=True)
class AlphaMap:
    alpha: np.ndarray
    s: np.ndarray
    z: np.ndarray
    mu: float
    sigma: float
    params: AlphaParams
    #: intermediate images after dilation, rescale, sigmoid, rescale
    stages: dict = field(default_factory=dict, repr=False)


def disk(radius: int) -> np.ndarray:
    """Boolean footprint of all offsets with ``di**2 + dj**2 <= radius**2``."""
    r = int(radius)
    di, dj = np.mgrid[-r:r + 1, -r:r + 1]
    return di * di + dj * dj <= r * r


def minmax_rescale(a: np.ndarray) -> np.ndarray:
    """Map ``a`` onto [0, 1]; a constant map becomes all zeros."""
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def compute_alpha(model: SparseRowModel, params: AlphaParams = AlphaParams()) -> AlphaMap:
    """Per-pixel blending weights from receptive-field L1 statistics.

    Stages: row L1 norms (bias included) ``s``; absolute z-scores; disk dilation;
    rescale; logistic step at ``threshold``; rescale; Gaussian blur; clamp.
    Dilation and blur reflect at the borders. For per-channel models ``s`` is
    averaged over the channel mappings so one alpha serves every channel.
    """
    g = model.geometry
    shape = (g.out_height, g.out_width)
    p = params.resolved(*shape)
    s = np.mean([m.row_l1() for m in model.mappings], axis=0).reshape(shape)
    mu = float(s.mean())
    sigma = float(s.std())
    # floating-point std of a constant map is rounding noise, not spread
    if sigma <= 1e-12 * max(abs(mu), np.finfo(float).tiny):
        warnings.warn("all receptive fields have the same L1 norm; alpha is zero everywhere",
                      RuntimeWarning, stacklevel=2)
        zero = np.zeros(shape)
        return AlphaMap(zero, s, zero.copy(), mu, sigma, p)
    z = np.abs((s - mu) / sigma)
    dilated = ndimage.grey_dilation(z, footprint=disk(p.dilation_radius), mode="reflect")
    scaled = minmax_rescale(dilated)
    stepped = 1.0 / (1.0 + np.exp(-p.steepness * (scaled - p.threshold)))
    rescaled = minmax_rescale(stepped)
    blurred = ndimage.gaussian_filter(rescaled, p.gaussian_sigma, mode="reflect")
    alpha = np.clip(blurred, 0.0, 1.0)
    stages = {"dilated": dilated, "scaled": scaled, "stepped": stepped,
              "rescaled": rescaled, "blurred": blurred}
    return AlphaMap(alpha, s, z, mu, sigma, p, stages)


def refine(x: ImageBuffer, y: ImageBuffer, alpha: AlphaMap | np.ndarray) -> ImageBuffer:
    """Per-pixel convex blend ``(1 - alpha) * x + alpha * y``, same alpha on every channel."""
    a = alpha.alpha if isinstance(alpha, AlphaMap) else np.asarray(alpha, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"input {x.shape} and synthesized {y.shape} images differ in shape")
    if a.shape != (x.height, x.width):
        raise DataError(f"alpha map {a.shape} does not match image size {(x.height, x.width)}")
    return ImageBuffer((1.0 - a) * x.data + a * y.data)
