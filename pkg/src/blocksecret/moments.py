"""Fourth-order moment attack on the block structure.

Given snapshots ``y_l = A x_l`` under one fixed structure, the lifted vectors
``v_l = (A^T y_l)**2`` have a covariance that depends affinely on the block
indicator matrix ``B``.  Estimating that covariance, removing the
B-independent part and rescaling exposes ``B``; rounding recovers it.

Two de-biasing maps are provided:

``"isotropic"``
    subtract ``H = beta1 I + beta2 J`` and divide by ``gain * p (1 - p)``,
    the large-system approximation in which ``A^T A`` is treated as the
    identity (``gain=3`` by default, see :func:`debias`).
``"exact"``
    invert the exact covariance given ``A``::

        Sigma_v = 2 p^2 (G2 o G2) + p (1 - p) (Q B Q + 2 K_B),

    with ``G = A^T A``, ``G2 = G @ G``, ``Q = G o G`` and
    ``K_B[i, j] = sum_r (sum_{k in r} G_ik G_jk)^2``.  The ``K_B`` term is
    small off the diagonal, so ``B ~ Q^{-1} (Sigma_v - 2p^2 G2 o G2) Q^{-1} / (p(1-p))``.

The isotropic map is biased at moderate sizes (off-diagonal ``Q`` entries of
order 1/M accumulate over N columns); the exact map is what :func:`eavesdrop`
uses unless told otherwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

from .decoders import SolverConfig, solve
from .errors import DegenerateScaleError, DimensionError, ParameterError
from .model import BlockStructure, indicator_matrix

DEFAULT_CHUNK = 8192


@dataclass(frozen=True)
class HMatrix:
    """``beta1 I + beta2 J`` stored by its two coefficients."""

    beta1: float
    beta2: float

    def dense(self, N: int) -> np.ndarray:
        return self.beta1 * np.eye(N) + self.beta2 * np.ones((N, N))


@dataclass
class MomentEstimate:
    mean_v: np.ndarray
    Sigma_v_hat: np.ndarray
    B_tilde: np.ndarray
    B_hat: np.ndarray
    L: int
    V: Optional[np.ndarray] = None


@dataclass
class ExtractionReport:
    success: bool
    component_sizes: list
    expected_size: int
    message: str

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "component_sizes": self.component_sizes,
            "expected_size": self.expected_size,
            "message": self.message,
        }


@dataclass
class EavesdropResult:
    estimate: MomentEstimate
    report: ExtractionReport
    structure: Optional[BlockStructure] = None
    messages: Optional[np.ndarray] = None
    decoded: list = field(default_factory=list)


def _check_p(p):
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"activation probability must lie in [0, 1], got {p}")


def _gram(A):
    A = np.asarray(A, dtype=np.float64)
    return A.T @ A


def lift_snapshots(A, Y) -> np.ndarray:
    """Columns ``(A^T y_l) ** 2``; a 1-D ``Y`` is treated as one snapshot."""
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] != A.shape[0]:
        raise DimensionError(f"snapshots of length {Y.shape[0]} do not match channel of shape {A.shape}")
    back = A.T @ Y
    return back * back


def expected_v(A, p: float) -> np.ndarray:
    """``p * diag((A^T A)^2)``, the mean of a lifted snapshot."""
    _check_p(p)
    G = _gram(A)
    return p * np.einsum("ij,ij->i", G, G)


class CovarianceAccumulator:
    """Streaming ``sum_l (v_l - m)(v_l - m)^T`` around a known mean ``m``.

    Accumulators over disjoint snapshot sets can be merged.
    """

    def __init__(self, mean_v):
        self.mean_v = np.asarray(mean_v, dtype=np.float64)
        n = self.mean_v.size
        self.total = np.zeros((n, n))
        self.count = 0

    def add(self, V) -> "CovarianceAccumulator":
        V = np.asarray(V, dtype=np.float64)
        if V.ndim == 1:
            V = V[:, None]
        if V.shape[0] != self.mean_v.size:
            raise DimensionError(f"lifted snapshots of length {V.shape[0]} vs mean of length {self.mean_v.size}")
        D = V - self.mean_v[:, None]
        self.total += D @ D.T
        self.count += V.shape[1]
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if not np.array_equal(self.mean_v, other.mean_v):
            raise ParameterError("cannot merge accumulators built around different means")
        out = CovarianceAccumulator(self.mean_v)
        out.total = self.total + other.total
        out.count = self.count + other.count
        return out

    def covariance(self) -> np.ndarray:
        if self.count == 0:
            raise ParameterError("no snapshots accumulated")
        S = self.total / self.count
        return 0.5 * (S + S.T)


def empirical_covariance(V, mean_v) -> np.ndarray:
    """``(1/L) sum_l (v_l - E[v])(v_l - E[v])^T`` with the known mean."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 2 and V.shape[1] == 0:
        raise ParameterError("need at least one snapshot")
    return CovarianceAccumulator(mean_v).add(V).covariance()


def snapshot_covariance(A, Y, p: float, chunk: int = DEFAULT_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Known-mean covariance of the lifted snapshots without materialising V.

    ``Y`` is an M x L array or an iterable of M x l chunks.
    """
    mean_v = expected_v(A, p)
    acc = CovarianceAccumulator(mean_v)
    chunks: Iterable = _chunks(Y, chunk) if isinstance(Y, np.ndarray) else Y
    for block in chunks:
        acc.add(lift_snapshots(A, block))
    return acc.covariance(), mean_v


def _chunks(Y, size):
    if Y.ndim == 1:
        Y = Y[:, None]
    for start in range(0, Y.shape[1], size):
        yield Y[:, start:start + size]


def fourth_moment_oracle(bs: BlockStructure, p: float) -> np.ndarray:
    """``E[x_l^2 x_l'^2]``: 3p on the diagonal, p within a block, p^2 across blocks."""
    _check_p(p)
    B = indicator_matrix(bs)
    out = np.where(B > 0, p, p * p)
    np.fill_diagonal(out, 3 * p)
    return out


def h_matrix(p: float) -> HMatrix:
    _check_p(p)
    return HMatrix(8 * p - 2 * p * p, 2 * p * p)


def debias(Sigma_v_hat, p: float, N: Optional[int] = None, gain: float = 3.0) -> np.ndarray:
    """``(Sigma_v_hat - H) / (gain * p * (1 - p))``.

    ``gain=3`` makes ``debias(H + 3p(1-p) B) == B``; ``gain=1`` is the scale
    under which the in-block entries of the exact covariance sit near one.
    """
    S = np.asarray(Sigma_v_hat, dtype=np.float64)
    N = S.shape[0] if N is None else N
    if S.shape != (N, N):
        raise DimensionError(f"expected an {N} x {N} covariance, got {S.shape}")
    if not 0.0 < p < 1.0:
        raise DegenerateScaleError(f"p(1 - p) vanishes at p={p}")
    h = h_matrix(p)
    out = S - h.beta2
    out[np.diag_indices(N)] -= h.beta1
    return out / (gain * p * (1 - p))


def debias_exact(Sigma_v_hat, A, p: float) -> np.ndarray:
    """Invert the dominant ``Q B Q`` term of the exact covariance given ``A``."""
    S = np.asarray(Sigma_v_hat, dtype=np.float64)
    G = _gram(A)
    if S.shape != G.shape:
        raise DimensionError(f"covariance of shape {S.shape} vs channel with {G.shape[0]} columns")
    if not 0.0 < p < 1.0:
        raise DegenerateScaleError(f"p(1 - p) vanishes at p={p}")
    G2 = G @ G
    Q = G * G
    T = (S - 2 * p * p * G2 * G2) / (p * (1 - p))
    try:
        left = np.linalg.solve(Q, T)
        out = np.linalg.solve(Q, left.T).T
    except np.linalg.LinAlgError:
        Qi = np.linalg.pinv(Q)
        out = Qi @ T @ Qi
    return 0.5 * (out + out.T)


def round_indicator(B_tilde) -> np.ndarray:
    """Strict threshold at 1/2, symmetrised by OR, with a unit diagonal."""
    B = np.asarray(B_tilde) > 0.5
    B = B | B.T
    np.fill_diagonal(B, True)
    return B.astype(np.int8)


def indicator_to_structure(B_hat, d: int) -> tuple[Optional[BlockStructure], ExtractionReport]:
    """Blocks are the connected components of ``B_hat``; all must have size ``d``."""
    B_hat = np.asarray(B_hat)
    N = B_hat.shape[0]
    if B_hat.shape != (N, N):
        raise DimensionError("indicator must be square")
    if N % d:
        return None, ExtractionReport(False, [], d, f"block size {d} does not divide N={N}")
    n_comp, labels = connected_components(B_hat != 0, directed=False)
    sizes = np.bincount(labels, minlength=n_comp)
    # order components by smallest member so labels are canonical
    first = np.full(n_comp, N)
    np.minimum.at(first, labels, np.arange(N))
    order = np.argsort(first)
    rank = np.empty(n_comp, dtype=np.int64)
    rank[order] = np.arange(n_comp)
    labels = rank[labels]
    sizes = sizes[order].tolist()
    if any(s != d for s in sizes):
        bad = sorted({s for s in sizes if s != d})
        return None, ExtractionReport(False, sizes, d, f"{sum(s != d for s in sizes)} components with sizes {bad} != {d}")
    # a component of the right size must also be a clique
    B_struct = labels[:, None] == labels[None, :]
    if not np.array_equal(B_struct, B_hat != 0):
        return None, ExtractionReport(False, sizes, d, "components of size d are not cliques (non-transitive indicator)")
    return BlockStructure(labels, n_comp), ExtractionReport(True, sizes, d, f"{n_comp} blocks of size {d}")


def moment_estimate(A, Y, p: float, method: str = "exact", gain: float = 3.0,
                    keep_lifted: bool = False, chunk: int = DEFAULT_CHUNK) -> MomentEstimate:
    """Lift, estimate the covariance around the known mean, de-bias and round."""
    A = np.asarray(A, dtype=np.float64)
    if not 0.0 < p < 1.0:
        raise DegenerateScaleError(f"the attack needs 0 < p < 1, got {p}")
    V = None
    if keep_lifted:
        V = lift_snapshots(A, Y)
        mean_v = expected_v(A, p)
        S = empirical_covariance(V, mean_v)
        L = V.shape[1] if V.ndim == 2 else 1
    else:
        acc = CovarianceAccumulator(expected_v(A, p))
        chunks = _chunks(np.asarray(Y, dtype=np.float64), chunk) if isinstance(Y, np.ndarray) else Y
        for block in chunks:
            acc.add(lift_snapshots(A, block))
        S, mean_v, L = acc.covariance(), acc.mean_v, acc.count
    B_tilde, B_hat = indicator_from_covariance(S, A, p, method, gain)
    return MomentEstimate(mean_v, S, B_tilde, B_hat, L, V)


def indicator_from_covariance(S, A, p: float, method: str = "exact", gain: float = 3.0):
    """De-bias a lifted-snapshot covariance and round it; returns ``(B_tilde, B_hat)``."""
    if method == "exact":
        B_tilde = debias_exact(S, A, p)
    elif method == "isotropic":
        B_tilde = debias(S, p, np.shape(A)[1], gain=gain)
    else:
        raise ParameterError(f"unknown de-biasing method {method!r}; use 'exact' or 'isotropic'")
    return B_tilde, round_indicator(B_tilde)


def eavesdrop(Y, A, p: float, d: int, method: str = "exact", gain: float = 3.0,
              decode: Optional[str] = "block_omp", max_messages: Optional[int] = None,
              cfg: SolverConfig = SolverConfig()) -> EavesdropResult:
    """Estimate the block structure from snapshots and, if that succeeds,
    decode up to ``max_messages`` of them with the recovered structure.

    ``decode=None`` skips message recovery.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    est = moment_estimate(A, Y, p, method=method, gain=gain)
    structure, report = indicator_to_structure(est.B_hat, d)
    result = EavesdropResult(est, report, structure)
    if structure is not None and decode is not None:
        count = Y.shape[1] if max_messages is None else min(max_messages, Y.shape[1])
        out = np.zeros((A.shape[1], count))
        for l in range(count):
            res = solve(decode, Y[:, l], A, structure, cfg)
            out[:, l] = res.estimate
            result.decoded.append(res)
        result.messages = out
    return result


def sigma_v_oracle(A, bs: BlockStructure, p: float) -> np.ndarray:
    """Exact covariance of ``v = (A^T A x)**2`` for a block Bernoulli-Gaussian ``x``, given ``A``."""
    _check_p(p)
    G = _gram(A)
    if bs.N != G.shape[0]:
        raise DimensionError("structure and channel disagree on N")
    G2 = G @ G
    Q = G * G
    B = indicator_matrix(bs)
    K = np.zeros_like(G)
    for idx in bs.blocks():
        P = G[:, idx] @ G[:, idx].T
        K += P * P
    S = 2 * p * p * G2 * G2 + p * (1 - p) * (Q @ B @ Q + 2 * K)
    return 0.5 * (S + S.T)


def l_crit(N: float, M: float, d: float) -> float:
    """``N^4 ln(N)^4 / (M^4 d)`` (natural logarithm)."""
    if N <= 0 or M <= 0 or d <= 0:
        raise ParameterError("N, M and d must be positive")
    return N ** 4 * math.log(N) ** 4 / (M ** 4 * d)
