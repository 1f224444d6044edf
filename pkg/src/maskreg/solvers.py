"""Fitting image-to-image mappings.

The main path is masked ridge regression. Because the Hessian of the masked
objective is block diagonal with one block per output pixel, the single Newton
step from ``W = 0`` splits into K tiny systems, one per output pixel, each over
that pixel's receptive field plus its bias::

    (X_S^T X_S + lam I) w_S = X_S^T t_k

where ``X_S`` holds the receptive-field columns of ``X`` and a column of ones.
Dense ridge, LASSO (coordinate descent) and OMP are provided as baselines.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
import scipy.linalg as la

from .dataset import DesignSet, Strategy
from .errors import GeometryError, NumericError, SizeLimitError
from .model import Mapping, SparseRowModel
from .topology import RfGeometry, Topology, build_topology, dense_mask

__all__ = [
    "Hyperparams",
    "SOLVERS",
    "solve_masked",
    "masked_mapping",
    "solve_ridge",
    "solve_lasso",
    "solve_lasso_row",
    "solve_omp_row",
    "objective_masked",
    "gradient_masked",
    "hessian_block",
    "hessian_masked",
    "fit_model",
]

log = logging.getLogger(__name__)

SOLVERS = ("mr", "ridge", "lasso", "omp")

#: refuse dense ridge when D*K exceeds this many weights
RIDGE_MAX_WEIGHTS = 1 << 26
#: gathered floats per batched chunk of reduced systems
_CHUNK_FLOATS = 1 << 22


@dataclass(frozen=True)
class Hyperparams:
    lambda_m: float = 1.0
    lambda_2: float = 1.0
    lambda_1: float = 0.1
    lambda_0: int = 9

    def __post_init__(self):
        if not self.lambda_m > 0:
            raise ValueError("lambda_m must be > 0")
        if not self.lambda_2 > 0:
            raise ValueError("lambda_2 must be > 0")
        if not self.lambda_1 >= 0:
            raise ValueError("lambda_1 must be >= 0")
        if int(self.lambda_0) != self.lambda_0 or self.lambda_0 < 1:
            raise ValueError("lambda_0 must be a positive integer")


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _effective_lambda(design: DesignSet, lam: float) -> float:
    # joint colour stacks C rows per pair; keep the penalty per pair, not per row
    return lam * design.row_multiplicity


def _check_geometry(design: DesignSet, topology: Topology) -> None:
    g = topology.geometry
    if design.D != g.n_inputs or design.K != g.n_outputs:
        raise GeometryError(f"design is D={design.D}, K={design.K} but topology expects "
                            f"D={g.n_inputs}, K={g.n_outputs}")


# Masked regression -------------------------------------------------------------

def _solve_chunk(Xa, T, idx, rows, lam):
    A = Xa[:, idx].transpose(1, 0, 2)                       # (G, N, m)
    At = A.transpose(0, 2, 1)
    H = At @ A
    m = idx.shape[1]
    H[:, np.arange(m), np.arange(m)] += lam
    rhs = At @ T[:, rows].T[:, :, None]
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError as exc:
        raise NumericError("reduced system is not positive definite") from exc
    return np.linalg.solve(H, rhs)[:, :, 0]


def _chunks(topology: Topology, n_samples: int):
    """Group rows by receptive-field size into fixed batches.

    Batch boundaries depend only on the data shape, never on the worker count,
    so results are identical for any degree of parallelism.
    """
    sizes = topology.row_sizes
    for m in np.unique(sizes):
        rows = np.flatnonzero(sizes == m)
        step = max(1, _CHUNK_FLOATS // (n_samples * (int(m) + 1)))
        for start in range(0, len(rows), step):
            yield rows[start:start + step]


def masked_mapping(design: DesignSet, topology: Topology, lambda_m: float,
                   jobs: int = 1) -> Mapping:
    """Solve every output pixel's reduced system and return the learned mapping."""
    _check_geometry(design, topology)
    if not lambda_m > 0:
        raise ValueError("lambda_m must be > 0")
    lam = _effective_lambda(design, lambda_m)
    Xa = _augment(design.X)
    T = design.T
    D = design.D
    weights = np.empty(topology.n_weights)
    bias = np.empty(topology.geometry.n_outputs)
    indptr, indices = topology.indptr, topology.indices

    def work(rows):
        m = indptr[rows[0] + 1] - indptr[rows[0]]
        starts = indptr[rows]
        idx = np.empty((len(rows), m + 1), dtype=np.int64)
        idx[:, :m] = indices[starts[:, None] + np.arange(m)]
        idx[:, m] = D
        return rows, starts, _solve_chunk(Xa, T, idx, rows, lam)

    chunks = list(_chunks(topology, design.N))
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = map(work, chunks)
    for rows, starts, sol in results:
        m = sol.shape[1] - 1
        weights[starts[:, None] + np.arange(m)] = sol[:, :m]
        bias[rows] = sol[:, m]
    return Mapping.from_topology(topology, weights, bias)


def solve_masked(design: DesignSet | Sequence[DesignSet], topology: Topology,
                 lambda_m: float, jobs: int = 1) -> SparseRowModel:
    """Masked ridge regression with local receptive fields.

    Parameters
    ----------
    design : DesignSet or list of DesignSet
        Training matrices; a list of three for the per-channel strategy.
    topology : Topology
        Receptive field of every output pixel.
    lambda_m : float
        Ridge penalty on the masked weights, bias included.
    jobs : int
        Worker threads for the per-pixel solves. Does not change the result.
    """
    designs = [design] if isinstance(design, DesignSet) else list(design)
    maps = [masked_mapping(d, topology, lambda_m, jobs) for d in designs]
    return SparseRowModel(topology.geometry, designs[0].strategy, maps,
                          {"solver": "mr", "lambda": lambda_m})


def objective_masked(W: np.ndarray, design: DesignSet, topology: Topology, lambda_m: float) -> float:
    """Masked objective for a dense K x (D+1) matrix whose last column is the bias."""
    _check_geometry(design, topology)
    M = dense_mask(topology, with_bias=True)
    WM = W * M
    R = WM @ _augment(design.X).T - design.T.T
    lam = _effective_lambda(design, lambda_m)
    return 0.5 * float(np.sum(R * R)) + 0.5 * lam * float(np.sum(WM * WM))


def gradient_masked(W: np.ndarray, design: DesignSet, topology: Topology, lambda_m: float) -> np.ndarray:
    """Gradient of :func:`objective_masked`, flattened row-major to length K*(D+1)."""
    _check_geometry(design, topology)
    M = dense_mask(topology, with_bias=True)
    Xa = _augment(design.X)
    R = (W * M) @ Xa.T - design.T.T                 # (K, N) residuals
    lam = _effective_lambda(design, lambda_m)
    G = (R @ Xa) * M + lam * W * M
    return G.ravel()


def hessian_block(k: int, design: DesignSet, topology: Topology, lambda_m: float) -> np.ndarray:
    """Diagonal Hessian block of output pixel ``k`` over its receptive field and bias."""
    _check_geometry(design, topology)
    A = _augment(design.X)[:, np.append(topology[k], design.D)]
    return A.T @ A + _effective_lambda(design, lambda_m) * np.eye(A.shape[1])


# Ridge -------------------------------------------------------------------------

def solve_ridge(design: DesignSet, lambda_2: float, max_weights: int = RIDGE_MAX_WEIGHTS) -> np.ndarray:
    """Dense ridge regression with a (penalized) bias.

    Returns a K x (D+1) array whose last column is the bias.
    """
    if not lambda_2 > 0:
        raise ValueError("lambda_2 must be > 0")
    if design.D * design.K > max_weights:
        raise SizeLimitError(f"dense ridge needs D*K = {design.D * design.K} weights, "
                             f"above the cap of {max_weights}")
    Xa = _augment(design.X)
    lam = _effective_lambda(design, lambda_2)
    H = Xa.T @ Xa
    H[np.diag_indices_from(H)] += lam
    try:
        return la.solve(H, Xa.T @ design.T, assume_a="pos").T
    except la.LinAlgError as exc:
        raise NumericError(f"ridge system is singular: {exc}") from exc


# LASSO -------------------------------------------------------------------------

@numba.njit(cache=True)
def _cd_sweep(G, c, diag, lam, w, q, active_only):
    dmax = 0.0
    for j in range(len(c)):
        if diag[j] <= 0.0 or (active_only and w[j] == 0.0):
            continue
        rho = c[j] - q[j] + diag[j] * w[j]
        if rho > lam:
            new = (rho - lam) / diag[j]
        elif rho < -lam:
            new = (rho + lam) / diag[j]
        else:
            new = 0.0
        delta = new - w[j]
        if delta != 0.0:
            w[j] = new
            for i in range(len(q)):
                q[i] += delta * G[i, j]
            if abs(delta) > dmax:
                dmax = abs(delta)
    return dmax


@numba.njit(cache=True)
def _lasso_cd(G, c, lam, tol, max_sweeps):
    """Cyclic coordinate descent on ``0.5 w'Gw - c'w + lam |w|_1``.

    Alternates a full sweep with sweeps over the nonzero coordinates only; it
    stops after a full sweep whose largest update is below ``tol``.
    """
    D = len(c)
    diag = np.empty(D)
    for j in range(D):
        diag[j] = G[j, j]
    w = np.zeros(D)
    q = np.zeros(D)  # G @ w, kept up to date
    sweeps = 0
    while sweeps < max_sweeps:
        dmax = _cd_sweep(G, c, diag, lam, w, q, False)
        sweeps += 1
        if dmax < tol:
            break
        while sweeps < max_sweeps:
            dmax = _cd_sweep(G, c, diag, lam, w, q, True)
            sweeps += 1
            if dmax < tol:
                break
    return w, sweeps


def solve_lasso(X: np.ndarray, T: np.ndarray, lambda_1: float, tol: float = 1e-7,
                max_sweeps: int = 10_000) -> np.ndarray:
    """Column-wise LASSO with an unpenalized intercept, by cyclic coordinate descent.

    Minimizes ``0.5 * ||X w_k + b_k - t_k||^2 + lambda_1 * ||w_k||_1`` for every
    column ``t_k`` of ``T`` and returns a K x (D+1) array (bias last). Each column
    converges once a full sweep moves no coordinate by ``tol`` or more.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if T.ndim == 1:
        T = T[:, None]
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(T))):
        raise NumericError("non-finite input to LASSO")
    if lambda_1 < 0:
        raise ValueError("lambda_1 must be >= 0")
    D, K = X.shape[1], T.shape[1]
    # the intercept is unpenalized, so it is profiled out by centering
    x_mean, t_mean = X.mean(axis=0), T.mean(axis=0)
    Xc, Tc = X - x_mean, T - t_mean
    G = np.ascontiguousarray(Xc.T @ Xc)
    C = Xc.T @ Tc
    W = np.zeros((D, K))
    stalled = 0
    for k in range(K):
        W[:, k], sweeps = _lasso_cd(G, np.ascontiguousarray(C[:, k]), float(lambda_1),
                                    float(tol), int(max_sweeps))
        stalled += sweeps >= max_sweeps
    if stalled:
        log.warning("LASSO hit %d sweeps on %d of %d column(s)", max_sweeps, stalled, K)
    b = t_mean - x_mean @ W
    return np.vstack([W, b]).T


def solve_lasso_row(X: np.ndarray, t: np.ndarray, lambda_1: float, tol: float = 1e-7,
                    max_sweeps: int = 10_000) -> np.ndarray:
    """Single-target LASSO; returns the D+1 vector of weights followed by the bias."""
    return solve_lasso(X, np.asarray(t, dtype=np.float64)[:, None], lambda_1, tol, max_sweeps)[0]


# OMP ---------------------------------------------------------------------------

class _OmpDictionary:
    """Ones-augmented design with unit-norm atoms, shared across targets."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if not np.all(np.isfinite(X)):
            raise NumericError("non-finite input to OMP")
        self.Xa = _augment(X)
        norms = np.linalg.norm(self.Xa, axis=0)
        self.usable = norms > 0
        self.Xn = self.Xa / np.where(self.usable, norms, 1.0)

    def fit(self, t: np.ndarray, n_nonzero: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if not np.all(np.isfinite(t)):
            raise NumericError("non-finite target for OMP")
        n_atoms = self.Xa.shape[1]
        if not 1 <= n_nonzero <= n_atoms:
            raise ValueError(f"lambda_0 must lie in [1, {n_atoms}], got {n_nonzero}")
        coef = np.zeros(n_atoms)
        support: list[int] = []
        sol = np.zeros(0)
        r = t.copy()
        floor = 1e-13 * max(np.linalg.norm(t), 1.0)
        for _ in range(n_nonzero):
            if np.linalg.norm(r) <= floor:
                break
            corr = np.abs(self.Xn.T @ r)
            corr[~self.usable] = -1.0
            corr[support] = -1.0
            j = int(np.argmax(corr))
            if corr[j] <= floor:
                break
            support.append(j)
            A = self.Xa[:, support]
            sol = np.linalg.lstsq(A, t, rcond=None)[0]
            r = t - A @ sol
        coef[support] = sol
        return coef


def solve_omp_row(X: np.ndarray, t: np.ndarray, lambda_0: int) -> np.ndarray:
    """Orthogonal matching pursuit with at most ``lambda_0`` atoms.

    The dictionary is ``X`` with a column of ones appended (the bias atom), each
    atom normalized to unit length for selection. Returns the D+1 vector of
    weights followed by the bias.
    """
    return _OmpDictionary(X).fit(t, int(lambda_0))


def solve_omp(X: np.ndarray, T: np.ndarray, lambda_0: int) -> np.ndarray:
    """OMP for every column of ``T``; returns K x (D+1) with bias last."""
    dic = _OmpDictionary(X)
    T = np.asarray(T, dtype=np.float64)
    return np.stack([dic.fit(T[:, k], int(lambda_0)) for k in range(T.shape[1])])


# Dispatcher --------------------------------------------------------------------

def _dense_to_mapping(Wb: np.ndarray, keep_zeros: bool) -> Mapping:
    return Mapping.from_dense(Wb[:, :-1], Wb[:, -1], keep_zeros=keep_zeros)


def fit_model(design: DesignSet | Sequence[DesignSet], solver: str, lam: float,
              geometry: RfGeometry, jobs: int = 1, *, lasso_tol: float = 1e-7,
              lasso_max_sweeps: int = 10_000,
              ridge_max_weights: int = RIDGE_MAX_WEIGHTS) -> SparseRowModel:
    """Train one of the four solvers and wrap the result as a model.

    ``lam`` is lambda_M, lambda_2, lambda_1 or lambda_0 depending on ``solver``.
    ``geometry`` supplies the receptive field for ``mr``; the other solvers only
    use its image sizes.
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {SOLVERS}")
    designs = [design] if isinstance(design, DesignSet) else list(design)
    for d in designs:
        if (d.D, d.K) != (geometry.n_inputs, geometry.n_outputs):
            raise GeometryError(f"design is D={d.D}, K={d.K}; geometry expects "
                                f"D={geometry.n_inputs}, K={geometry.n_outputs}")
    t0 = time.perf_counter()
    if solver == "mr":
        topology = build_topology(geometry)
        maps = [masked_mapping(d, topology, lam, jobs) for d in designs]
    elif solver == "ridge":
        maps = [_dense_to_mapping(solve_ridge(d, lam, ridge_max_weights), True) for d in designs]
    elif solver == "lasso":
        maps = [_dense_to_mapping(solve_lasso(d.X, d.T, lam * d.row_multiplicity, lasso_tol,
                                              lasso_max_sweeps), False) for d in designs]
    else:
        maps = [_dense_to_mapping(solve_omp(d.X, d.T, int(lam)), False) for d in designs]
    elapsed = time.perf_counter() - t0
    return SparseRowModel(geometry, designs[0].strategy, maps,
                          {"solver": solver, "lambda": lam, "train_seconds": elapsed,
                           "trained_at": time.time()})


def hessian_masked(design: DesignSet, topology: Topology, lambda_m: float) -> np.ndarray:
    """Full K(D+1) x K(D+1) Hessian of the masked objective. Small problems only.

    Entry ((i, j), (l, m)) is ``M_ij M_lm sum_n X_nj X_nm`` (plus ``lam M_ij`` on
    the diagonal) when ``i == l`` and zero across different output pixels.
    """
    _check_geometry(design, topology)
    M = dense_mask(topology, with_bias=True).astype(np.float64)
    Xa = _augment(design.X)
    G = Xa.T @ Xa
    lam = _effective_lambda(design, lambda_m)
    K, P = M.shape
    H = np.zeros((K * P, K * P))
    for i in range(K):
        block = np.outer(M[i], M[i]) * G + np.diag(lam * M[i])
        H[i * P:(i + 1) * P, i * P:(i + 1) * P] = block
    return H
