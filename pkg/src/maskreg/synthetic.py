"""Synthetic paired-image tasks with a known local linear ground truth."""

from __future__ import annotations

import numpy as np

from .dataset import ImageBuffer
from .model import Mapping
from .topology import RfGeometry, build_topology

__all__ = ["local_linear_task"]


def local_linear_task(n_pairs: int, size: int = 16, taps_per_side: int = 3, noise: float = 0.01,
                      seed: int = 0, channels: int = 1):
    """Pairs ``(x, Wx + b + noise)`` for a fixed random map ``W`` of r x r support.

    Inputs are uniform on [0, 1]. Each row of ``W`` is a random positive field
    scaled to sum to 0.6 with a random signed perturbation, and the bias lies in
    [0.1, 0.3]. Noise-free targets therefore stay inside [0, 1], including at the
    borders where fields are truncated.

    Returns ``(pairs, truth)`` where ``truth`` is the generating :class:`Mapping`.
    """
    rng = np.random.default_rng(seed)
    geometry = RfGeometry.square(size, taps_per_side)
    topo = build_topology(geometry)
    w = rng.uniform(0.2, 1.0, topo.n_weights)
    rows = np.repeat(np.arange(geometry.n_outputs), topo.row_sizes)
    w *= 0.6 / np.bincount(rows, w)[rows]
    w += rng.normal(0.0, 0.05, w.shape)
    b = rng.uniform(0.1, 0.3, geometry.n_outputs)
    truth = Mapping.from_topology(topo, w, b)
    X = rng.uniform(0.0, 1.0, (n_pairs, channels, geometry.n_inputs))
    T = truth.apply(X.reshape(-1, geometry.n_inputs)).reshape(n_pairs, channels, -1)
    T = T + rng.normal(0.0, noise, T.shape)
    pairs = [(ImageBuffer(x.reshape(channels, size, size)), ImageBuffer(t.reshape(channels, size, size)))
             for x, t in zip(X, T)]
    return pairs, truth
