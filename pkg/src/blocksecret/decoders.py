"""Sparse recovery for the legitimate receiver (block-structured) and the
eavesdropper (plain sparsity).

All solvers take ``y`` of length M and ``A`` of shape (M, N) and return a
:class:`RecoveryResult`.  The unstructured solvers are written out separately
rather than delegating to the block versions with singleton blocks, so that
the two families can be checked against each other.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DimensionError, ParameterError
from .model import BlockStructure

GREEDY_ITER_FACTOR = 10
IHT_MAX_ITER = 1000
BP_MAX_ITER = 5000
DIVERGENCE_PATIENCE = 10


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: Optional[int] = None
    residual_tolerance: float = 1e-8
    step_size: Union[float, str] = "auto"
    admm_penalty: float = 1.0
    sparsity_budget: Optional[int] = None

    def __post_init__(self):
        if self.max_iterations is not None and self.max_iterations <= 0:
            raise ParameterError("max_iterations must be positive")
        if self.residual_tolerance <= 0:
            raise ParameterError("residual_tolerance must be positive")
        if self.step_size != "auto" and not (isinstance(self.step_size, (int, float)) and self.step_size > 0):
            raise ParameterError("step_size must be 'auto' or a positive number")
        if self.admm_penalty <= 0:
            raise ParameterError("admm_penalty must be positive")
        if self.sparsity_budget is not None and self.sparsity_budget <= 0:
            raise ParameterError("sparsity_budget must be positive")


@dataclass
class RecoveryResult:
    estimate: np.ndarray
    converged: bool
    iterations_used: int
    residual_norm: float
    support: tuple = ()
    rank_deficient: bool = False
    residual_history: list = field(default_factory=list, repr=False)


def _check_inputs(y, A):
    y = np.asarray(y, dtype=np.float64).ravel()
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != y.size:
        raise DimensionError(f"observation of length {y.size} does not match channel of shape {A.shape}")
    return y, A


def _check_structure(A, bs: BlockStructure):
    if bs.N != A.shape[1]:
        raise DimensionError(f"structure over {bs.N} coordinates does not match channel with {A.shape[1]} columns")


def _zero_result(N) -> RecoveryResult:
    return RecoveryResult(np.zeros(N), True, 0, 0.0, (), False, [0.0])


def _block_norms(v, labels, R):
    return np.sqrt(np.bincount(labels, weights=v * v, minlength=R))


def _top_k(scores, k):
    """Indices of the ``k`` largest scores; the lowest index wins ties."""
    return np.sort(np.argsort(-scores, kind="stable")[:k])


def _unit_columns(A):
    """Reciprocal column norms, so that correlations are scale-free (zero columns score 0)."""
    norms = np.linalg.norm(A, axis=0)
    return np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)


def _lstsq(A_sub, y):
    coef, _, rank, _ = np.linalg.lstsq(A_sub, y, rcond=None)
    return coef, rank < A_sub.shape[1]


def spectral_norm(A, iterations: int = 50, tol: float = 1e-6) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``."""
    A = np.asarray(A, dtype=np.float64)
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    sigma = 0.0
    for _ in range(iterations):
        w = A.T @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = np.sqrt(nw)
        if abs(new - sigma) <= tol * new:
            return float(new)
        sigma = new
    return float(sigma)


def recovery_success(x_true, x_hat, tol: float = 1e-4) -> bool:
    """``||x_hat - x_true|| <= tol * max(||x_true||, 1)``."""
    x_true = np.asarray(x_true, dtype=np.float64).ravel()
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    if x_true.shape != x_hat.shape:
        raise DimensionError(f"length mismatch: {x_true.size} vs {x_hat.size}")
    return bool(np.linalg.norm(x_hat - x_true) <= tol * max(np.linalg.norm(x_true), 1.0))


# -- greedy ---------------------------------------------------------------------------

def block_omp(y, A, bs: BlockStructure, cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Block orthogonal matching pursuit.

    Each step adds the block whose columns correlate most with the residual
    (l2 norm of the per-column correlations, each column scaled to unit
    norm) and refits by least squares on all selected blocks.  Stops at
    the residual tolerance, the block budget (default: as many blocks as fit
    in M columns) or the iteration cap (default 10 R).
    """
    y, A = _check_inputs(y, A)
    _check_structure(A, bs)
    M, N = A.shape
    ny = np.linalg.norm(y)
    if ny == 0:
        return _zero_result(N)
    blocks = bs.blocks()
    inv_norms = _unit_columns(A)
    budget = cfg.sparsity_budget or M // bs.d
    max_iter = cfg.max_iterations or GREEDY_ITER_FACTOR * bs.R
    selected: list[int] = []
    cols = np.array([], dtype=np.int64)
    x = np.zeros(N)
    residual = y.copy()
    history = [ny]
    rank_deficient = False
    it = 0
    while it < max_iter and len(selected) < budget and history[-1] > cfg.residual_tolerance * ny:
        scores = _block_norms(inv_norms * (A.T @ residual), bs.labels, bs.R)
        scores[selected] = -1.0
        r = int(np.argmax(scores))
        if (len(selected) + 1) * bs.d > M:
            break
        selected.append(r)
        cols = np.concatenate([blocks[s] for s in sorted(selected)])
        coef, deficient = _lstsq(A[:, cols], y)
        rank_deficient |= deficient
        x = np.zeros(N)
        x[cols] = coef
        residual = y - A @ x
        history.append(float(np.linalg.norm(residual)))
        it += 1
    return RecoveryResult(x, history[-1] <= cfg.residual_tolerance * ny, it, history[-1],
                          tuple(sorted(selected)), rank_deficient, history)


def omp(y, A, cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Orthogonal matching pursuit over single columns (normalized correlations)."""
    y, A = _check_inputs(y, A)
    M, N = A.shape
    ny = np.linalg.norm(y)
    if ny == 0:
        return _zero_result(N)
    inv_norms = _unit_columns(A)
    budget = min(cfg.sparsity_budget or M, M)
    max_iter = cfg.max_iterations or GREEDY_ITER_FACTOR * N
    support: list[int] = []
    x = np.zeros(N)
    residual = y.copy()
    history = [ny]
    rank_deficient = False
    it = 0
    while it < max_iter and len(support) < budget and history[-1] > cfg.residual_tolerance * ny:
        scores = inv_norms * np.abs(A.T @ residual)
        scores[support] = -1.0
        support.append(int(np.argmax(scores)))
        cols = np.array(sorted(support))
        coef, deficient = _lstsq(A[:, cols], y)
        rank_deficient |= deficient
        x = np.zeros(N)
        x[cols] = coef
        residual = y - A @ x
        history.append(float(np.linalg.norm(residual)))
        it += 1
    return RecoveryResult(x, history[-1] <= cfg.residual_tolerance * ny, it, history[-1],
                          tuple(sorted(support)), rank_deficient, history)


# -- hard thresholding ----------------------------------------------------------------

def _iht_setup(A, cfg, width, M):
    if cfg.sparsity_budget is None:
        raise ParameterError("iterative hard thresholding needs a sparsity_budget")
    if cfg.sparsity_budget * width > M:
        warnings.warn(f"sparsity budget of {cfg.sparsity_budget * width} coordinates exceeds M={M}",
                      stacklevel=3)
    if cfg.step_size == "auto":
        s = spectral_norm(A)
        return 1.0 / (s * s) if s > 0 else 1.0
    return float(cfg.step_size)


def _iht_loop(y, A, mu, max_iter, tol, threshold):
    N = A.shape[1]
    ny = np.linalg.norm(y)
    x = np.zeros(N)
    residual = y.copy()
    history = [ny]
    rising = 0
    converged = False
    it = 0
    while it < max_iter:
        x = threshold(x + mu * (A.T @ residual))
        residual = y - A @ x
        history.append(float(np.linalg.norm(residual)))
        it += 1
        if history[-1] <= tol * ny:
            converged = True
            break
        rising = rising + 1 if history[-1] > history[-2] else 0
        if rising >= DIVERGENCE_PATIENCE or not np.isfinite(history[-1]):
            break
    return x, converged, it, history


def block_iht(y, A, bs: BlockStructure, cfg: SolverConfig) -> RecoveryResult:
    """Block iterative hard thresholding ``x <- T_k(x + mu A^T (y - A x))``.

    ``T_k`` keeps the ``k = cfg.sparsity_budget`` blocks of largest l2 norm.
    With ``step_size="auto"`` the step is ``1/||A||_2^2``.
    """
    y, A = _check_inputs(y, A)
    _check_structure(A, bs)
    M, N = A.shape
    mu = _iht_setup(A, cfg, bs.d, M)
    if np.linalg.norm(y) == 0:
        return _zero_result(N)
    k = min(cfg.sparsity_budget, bs.R)
    labels, R = bs.labels, bs.R

    def threshold(v):
        keep = np.zeros(R, dtype=bool)
        keep[_top_k(_block_norms(v, labels, R), k)] = True
        return v * keep[labels]

    x, converged, it, history = _iht_loop(y, A, mu, cfg.max_iterations or IHT_MAX_ITER,
                                          cfg.residual_tolerance, threshold)
    support = tuple(np.flatnonzero(_block_norms(x, labels, R) > 0).tolist())
    return RecoveryResult(x, converged, it, history[-1], support, False, history)


def iht(y, A, cfg: SolverConfig) -> RecoveryResult:
    """Iterative hard thresholding keeping the ``cfg.sparsity_budget`` largest entries."""
    y, A = _check_inputs(y, A)
    M, N = A.shape
    mu = _iht_setup(A, cfg, 1, M)
    if np.linalg.norm(y) == 0:
        return _zero_result(N)
    k = min(cfg.sparsity_budget, N)

    def threshold(v):
        out = np.zeros_like(v)
        keep = _top_k(np.abs(v), k)
        out[keep] = v[keep]
        return out

    x, converged, it, history = _iht_loop(y, A, mu, cfg.max_iterations or IHT_MAX_ITER,
                                          cfg.residual_tolerance, threshold)
    return RecoveryResult(x, converged, it, history[-1], tuple(np.flatnonzero(x).tolist()), False, history)


# -- basis pursuit --------------------------------------------------------------------

class _AffineProjector:
    """Euclidean projection onto ``{x : A x = y}``."""

    def __init__(self, A, y):
        self.A, self.y = A, y
        try:
            self._chol = cho_factor(A @ A.T)
            self._pinv = None
        except LinAlgError:
            self._chol = None
            self._pinv = np.linalg.pinv(A)

    def __call__(self, v):
        r = self.y - self.A @ v
        if self._chol is not None:
            return v + self.A.T @ cho_solve(self._chol, r)
        return v + self._pinv @ r


def _admm(y, A, cfg, shrink):
    """ADMM for ``min f(z) s.t. A x = y, x = z`` with ``shrink`` the prox of f/rho."""
    N = A.shape[1]
    rho = cfg.admm_penalty
    project = _AffineProjector(A, y)
    x = project(np.zeros(N))
    z = x.copy()
    u = np.zeros(N)
    tol = cfg.residual_tolerance
    history = []
    converged = False
    it = 0
    for it in range(1, (cfg.max_iterations or BP_MAX_ITER) + 1):
        x = project(z - u)
        z_old = z
        z = shrink(x + u, 1.0 / rho)
        u += x - z
        primal = np.linalg.norm(x - z)
        dual = rho * np.linalg.norm(z - z_old)
        history.append(float(np.linalg.norm(y - A @ x)))
        scale = max(np.linalg.norm(x), np.linalg.norm(z), 1.0)
        if max(primal, dual) < tol * scale:
            converged = True
            break
    return x, z, converged, it, history


def _polish(y, A, x, cols):
    """Least-squares refit on ``cols``; kept only if it fits ``y`` exactly."""
    if 0 < cols.size <= A.shape[0]:
        coef, deficient = _lstsq(A[:, cols], y)
        if not deficient:
            cand = np.zeros_like(x)
            cand[cols] = coef
            if np.linalg.norm(y - A @ cand) <= 1e-9 * max(np.linalg.norm(y), 1.0):
                return cand, True
    return x, False


def block_bp(y, A, bs: BlockStructure, cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Block basis pursuit: minimise ``sum_r ||x[r]||_2`` subject to ``A x = y``.

    Solved by ADMM with an exact affine projection, so every returned iterate
    is feasible.  A least-squares polish on the blocks left active by the
    group shrinkage removes the residual solver noise.
    """
    y, A = _check_inputs(y, A)
    _check_structure(A, bs)
    N = A.shape[1]
    if np.linalg.norm(y) == 0:
        return _zero_result(N)
    labels, R = bs.labels, bs.R

    def shrink(v, t):
        norms = _block_norms(v, labels, R)
        scale = np.maximum(1.0 - t / np.maximum(norms, 1e-300), 0.0)
        return v * scale[labels]

    x, z, converged, it, history = _admm(y, A, cfg, shrink)
    active = np.flatnonzero(_block_norms(z, labels, R) > 0)
    cols = np.flatnonzero(np.isin(labels, active))
    x, _ = _polish(y, A, x, cols)
    support = tuple(np.flatnonzero(_block_norms(x, labels, R) > 0).tolist())
    return RecoveryResult(x, converged, it, float(np.linalg.norm(y - A @ x)), support, False, history)


def bp(y, A, cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Basis pursuit: minimise ``||x||_1`` subject to ``A x = y``."""
    y, A = _check_inputs(y, A)
    N = A.shape[1]
    if np.linalg.norm(y) == 0:
        return _zero_result(N)

    def shrink(v, t):
        return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)

    x, z, converged, it, history = _admm(y, A, cfg, shrink)
    x, _ = _polish(y, A, x, np.flatnonzero(z))
    return RecoveryResult(x, converged, it, float(np.linalg.norm(y - A @ x)),
                          tuple(np.flatnonzero(x).tolist()), False, history)


# -- exhaustive oracle ----------------------------------------------------------------

def exhaustive_block_l0(y, A, bs: BlockStructure, max_blocks: Optional[int] = None,
                        tol: float = 1e-9) -> RecoveryResult:
    """Sparsest block support reproducing ``y`` by brute-force enumeration.

    Tries all supports of 0, 1, 2, ... blocks, least squares on each, and
    returns the first exact fit.  Only usable on tiny instances.
    """
    y, A = _check_inputs(y, A)
    _check_structure(A, bs)
    M, N = A.shape
    ny = np.linalg.norm(y)
    if ny == 0:
        return _zero_result(N)
    blocks = bs.blocks()
    limit = max_blocks if max_blocks is not None else M // bs.d
    count = 0
    for s in range(1, limit + 1):
        for combo in itertools.combinations(range(bs.R), s):
            count += 1
            cols = np.concatenate([blocks[r] for r in combo])
            coef, deficient = _lstsq(A[:, cols], y)
            x = np.zeros(N)
            x[cols] = coef
            res = float(np.linalg.norm(y - A @ x))
            if res <= tol * ny:
                return RecoveryResult(x, True, count, res, combo, deficient, [])
    return RecoveryResult(np.zeros(N), False, count, ny, (), False, [])


def exhaustive_l0(y, A, max_nonzeros: Optional[int] = None, tol: float = 1e-9) -> RecoveryResult:
    y, A = _check_inputs(y, A)
    N = A.shape[1]
    return exhaustive_block_l0(y, A, BlockStructure(np.arange(N), N), max_nonzeros, tol)


BLOCK_SOLVERS = {"block_omp": block_omp, "block_iht": block_iht, "block_bp": block_bp}
PLAIN_SOLVERS = {"omp": omp, "iht": iht, "bp": bp}


def solve(name: str, y, A, bs: Optional[BlockStructure] = None,
          cfg: SolverConfig = SolverConfig()) -> RecoveryResult:
    """Dispatch by solver name; block solvers require ``bs``."""
    if name in BLOCK_SOLVERS:
        if bs is None:
            raise ParameterError(f"solver {name!r} needs a block structure")
        return BLOCK_SOLVERS[name](y, A, bs, cfg)
    if name in PLAIN_SOLVERS:
        return PLAIN_SOLVERS[name](y, A, cfg)
    raise ParameterError(f"unknown solver {name!r}; choose from {sorted(BLOCK_SOLVERS) + sorted(PLAIN_SOLVERS)}")
