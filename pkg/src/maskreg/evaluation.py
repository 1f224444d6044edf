"""Error metric, regularizer grids and hold-out cross-validation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import ImageBuffer, Strategy, build_design_set
from .errors import DataError
from .model import SparseRowModel, count_nonzeros, synthesize_raw
from .solvers import SOLVERS, fit_model
from .topology import RfGeometry

__all__ = [
    "CvGrid",
    "CvResult",
    "default_grid",
    "mse_x100",
    "predict",
    "evaluate",
    "train",
    "cross_validate",
    "sparsity_ratio",
]


@dataclass(frozen=True)
class CvGrid:
    solver: str
    values: tuple

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise DataError(f"unknown solver {self.solver!r}")
        vals = tuple(self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise DataError("empty regularizer grid")
        if any(not v > 0 for v in vals):
            raise DataError("grid values must be positive")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise DataError("grid values must be strictly increasing")
        if self.solver == "omp" and any(int(v) != v for v in vals):
            raise DataError("OMP grid values must be integers")


def default_grid(solver: str, n_train: int | None = None, taps_per_side: int | None = None) -> CvGrid:
    """Regularizer grids used for model selection.

    ``mr``/``ridge``: 10 evenly spaced values from 0.1 to 10 inclusive.
    ``lasso``: 100 log-spaced values from 1e-3 to 1e2.
    ``omp``: every integer from 1 to ``n_train``; passing ``taps_per_side``
    caps it at ``r*r + 1`` so supports stay comparable to an r x r field.
    """
    if solver in ("mr", "ridge"):
        values = np.round(np.linspace(0.1, 10.0, 10), 12)
    elif solver == "lasso":
        values = np.logspace(-3, 2, 100)
    elif solver == "omp":
        if n_train is None:
            raise DataError("the OMP grid needs the number of training examples")
        top = n_train if taps_per_side is None else min(n_train, taps_per_side ** 2 + 1)
        values = np.arange(1, max(top, 1) + 1)
    else:
        raise DataError(f"unknown solver {solver!r}")
    return CvGrid(solver, tuple(v.item() for v in values))


def _as_array(images) -> np.ndarray:
    return np.stack([im.data if isinstance(im, ImageBuffer) else np.asarray(im, dtype=np.float64)
                     for im in images])


def mse_x100(predicted: Sequence, targets: Sequence) -> float:
    """Mean squared error over images, pixels and channels, times 100."""
    if len(predicted) == 0 or len(predicted) != len(targets):
        raise DataError(f"need matching nonempty image sets, got {len(predicted)} and {len(targets)}")
    p, t = _as_array(predicted), _as_array(targets)
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    return float(np.mean((p - t) ** 2) * 100.0)


def predict(model: SparseRowModel, images: Sequence[ImageBuffer]) -> list[np.ndarray]:
    """Unclamped predictions, as used for scoring."""
    return [synthesize_raw(model, im) for im in images]


def evaluate(model: SparseRowModel, pairs: Sequence[tuple[ImageBuffer, ImageBuffer]]) -> float:
    return mse_x100(predict(model, [p[0] for p in pairs]), [p[1] for p in pairs])


def train(pairs, solver: str, lam: float, strategy: Strategy | str = Strategy.GRAY,
          taps_per_side: int = 3, dilation: int = 1, jobs: int = 1, **solver_opts) -> SparseRowModel:
    """Build the design matrices for ``pairs`` and fit one model."""
    if not pairs:
        raise DataError("no training pairs")
    design = build_design_set(pairs, strategy)
    x, y = pairs[0]
    geometry = RfGeometry(x.height, x.width, y.height, y.width, taps_per_side, dilation)
    return fit_model(design, solver, lam, geometry, jobs, **solver_opts)


@dataclass(frozen=True)
class CvResult:
    best: float
    scores: tuple[tuple[float, float], ...]
    model: SparseRowModel

    def to_csv(self) -> str:
        lines = ["lambda,val_mse_x100"]
        lines += [f"{lam!r},{score!r}" for lam, score in self.scores]
        return "\n".join(lines) + "\n"


def cross_validate(train_pairs, val_pairs, solver: str, grid: CvGrid | None = None,
                   strategy: Strategy | str = Strategy.GRAY, taps_per_side: int = 3,
                   dilation: int = 1, jobs: int = 1, **solver_opts) -> CvResult:
    """Select the regularizer on a validation set, then refit on train + val.

    Each grid value is fit on ``train_pairs`` and scored with :func:`mse_x100`
    on ``val_pairs``. Ties go to the smallest value.
    """
    if not train_pairs or not val_pairs:
        raise DataError("cross-validation needs nonempty train and validation sets")
    if grid is None:
        grid = default_grid(solver, len(train_pairs))
    if grid.solver != solver:
        raise DataError(f"grid is for {grid.solver!r}, not {solver!r}")
    opts = dict(strategy=strategy, taps_per_side=taps_per_side, dilation=dilation, **solver_opts)

    def score(lam):
        model = train(train_pairs, solver, lam, jobs=1, **opts)
        return evaluate(model, val_pairs)

    if jobs > 1 and len(grid.values) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = list(pool.map(score, grid.values))
    else:
        scores = [score(lam) for lam in grid.values]
    best = grid.values[int(np.argmin(scores))]
    final = train(list(train_pairs) + list(val_pairs), solver, best, jobs=jobs, **opts)
    return CvResult(best, tuple(zip(grid.values, scores)), final)


def sparsity_ratio(model_a: SparseRowModel, model_b: SparseRowModel, tolerance: float = 0.0) -> float:
    """``count_nonzeros(a) / count_nonzeros(b)``."""
    denom = count_nonzeros(model_b, tolerance)
    if denom == 0:
        raise ZeroDivisionError("second model has no nonzero parameters")
    return count_nonzeros(model_a, tolerance) / denom
