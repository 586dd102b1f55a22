"""Protocol objects: parameters, the secret block structure, channel and messages.

Block labels are 0-based internally; the file format and CLI use 1-based ids.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DimensionError, IdentifiabilityError, ParameterError


def derive_seed_sequence(seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    """Child seed sequence for ``(seed, label, indices)``.

    The label is hashed with CRC-32 so the derivation is stable across runs and
    interpreters; distinct tuples give distinct spawn keys.
    """
    if seed < 0:
        raise ParameterError(f"seed must be non-negative, got {seed}")
    key = (zlib.crc32(label.encode("utf-8")),) + tuple(int(i) for i in indices)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def derive_rng(seed: int, label: str, *indices: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, label, *indices)))


def derive_seed(seed: int, label: str, *indices: int) -> int:
    """64-bit integer summarising the derived stream, for logging."""
    return int(derive_seed_sequence(seed, label, *indices).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ProtocolParams:
    N: int
    M: int
    d: int
    p: float

    def __post_init__(self):
        if self.N <= 0 or self.M <= 0 or self.d <= 0:
            raise ParameterError("N, M and d must be positive")
        if self.M >= self.N:
            raise ParameterError(f"need an underdetermined channel (M < N), got M={self.M}, N={self.N}")
        if self.N % self.d:
            raise ParameterError(f"block size d={self.d} does not divide N={self.N}")
        if not 0.0 <= self.p <= 1.0:
            raise ParameterError(f"activation probability must lie in [0, 1], got {self.p}")

    @property
    def R(self) -> int:
        return self.N // self.d

    @property
    def alpha(self) -> float:
        """Determinantal ratio M / (pN); infinite when p = 0."""
        return self.M / (self.p * self.N) if self.p > 0 else math.inf


class BlockStructure:
    """Partition of ``N`` coordinates into ``R`` blocks of equal size.

    ``labels[i]`` is the 0-based block of coordinate ``i``.  Instances are
    immutable and compare equal only when the labels agree exactly; use
    :meth:`same_partition` to compare up to relabeling.
    """

    __slots__ = ("_labels", "_R")

    def __init__(self, labels, num_blocks: int | None = None):
        labels = np.array(labels, dtype=np.int64).ravel()
        if labels.size == 0:
            raise ParameterError("a block structure needs at least one coordinate")
        R = int(labels.max()) + 1 if num_blocks is None else int(num_blocks)
        if labels.min() < 0 or labels.max() >= R:
            raise ParameterError(f"block labels must lie in [0, {R})")
        counts = np.bincount(labels, minlength=R)
        if np.any(counts != counts[0]) or labels.size != R * counts[0]:
            raise ParameterError(f"blocks must have equal sizes, got sizes {sorted(set(counts.tolist()))}")
        labels.setflags(write=False)
        self._labels = labels
        self._R = R

    @classmethod
    def from_assignment(cls, assignment, num_blocks: int | None = None) -> "BlockStructure":
        """Build from 1-based block ids."""
        return cls(np.asarray(assignment, dtype=np.int64) - 1, num_blocks)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def assignment(self) -> tuple[int, ...]:
        """1-based block id of every coordinate."""
        return tuple(int(v) + 1 for v in self._labels)

    @property
    def N(self) -> int:
        return self._labels.size

    @property
    def R(self) -> int:
        return self._R

    @property
    def d(self) -> int:
        return self.N // self._R

    def blocks(self) -> list[np.ndarray]:
        """Coordinate indices of each block, in block order."""
        order = np.argsort(self._labels, kind="stable")
        return [order[r * self.d:(r + 1) * self.d] for r in range(self._R)]

    def canonical(self) -> "BlockStructure":
        """Relabel blocks in order of first appearance."""
        _, first = np.unique(self._labels, return_index=True)
        rank = np.empty(self._R, dtype=np.int64)
        rank[np.argsort(first)] = np.arange(self._R)
        return BlockStructure(rank[self._labels], self._R)

    def same_partition(self, other: "BlockStructure") -> bool:
        return self.N == other.N and np.array_equal(self.canonical().labels, other.canonical().labels)

    def __eq__(self, other):
        if not isinstance(other, BlockStructure):
            return NotImplemented
        return self._R == other._R and np.array_equal(self._labels, other._labels)

    def __hash__(self):
        return hash((self._R, self._labels.tobytes()))

    def __repr__(self):
        return f"BlockStructure(N={self.N}, R={self.R}, d={self.d})"


@dataclass(frozen=True, eq=False)
class Message:
    """Block-sparse vector; ``active_blocks`` holds 0-based block labels."""

    values: np.ndarray
    active_blocks: frozenset

    @property
    def block_l0(self) -> int:
        return len(self.active_blocks)


def block_l0_norm(x, bs: BlockStructure) -> int:
    """Number of blocks of ``x`` that are not identically zero."""
    x = np.asarray(x)
    nz = np.zeros(bs.R, dtype=bool)
    np.logical_or.at(nz, bs.labels, x != 0)
    return int(nz.sum())


def sample_block_structure(N: int, d: int, rng: np.random.Generator) -> BlockStructure:
    """Uniform permutation of the coordinates cut into consecutive chunks of ``d``."""
    if N <= 0 or d <= 0:
        raise ParameterError("N and d must be positive")
    if N % d:
        raise ParameterError(f"block size d={d} does not divide N={N}")
    perm = rng.permutation(N)
    labels = np.empty(N, dtype=np.int64)
    labels[perm] = np.arange(N) // d
    return BlockStructure(labels, N // d)


def indicator_matrix(bs: BlockStructure) -> np.ndarray:
    """N x N matrix with ones where two coordinates share a block."""
    lab = bs.labels
    return (lab[:, None] == lab[None, :]).astype(np.float64)


def sample_channel(M: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. N(0, 1/M) channel matrix of shape (M, N)."""
    if M <= 0 or N <= 0:
        raise ParameterError("M and N must be positive")
    if M >= N:
        raise ParameterError(f"the channel must be underdetermined (M < N), got M={M}, N={N}")
    return rng.standard_normal((M, N)) / math.sqrt(M)


def _check_p(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"activation probability must lie in [0, 1], got {p}")


def sample_message(bs: BlockStructure, p: float, rng: np.random.Generator) -> Message:
    """Block Bernoulli-Gaussian message: each block is zero w.p. 1 - p, else i.i.d. N(0, 1)."""
    _check_p(p)
    active = rng.random(bs.R) < p
    z = rng.standard_normal(bs.N)
    values = z * active[bs.labels]
    return Message(values, frozenset(np.flatnonzero(active).tolist()))


def sample_messages(bs: BlockStructure, p: float, L: int, rng: np.random.Generator) -> np.ndarray:
    """``L`` independent messages as the columns of an N x L array."""
    _check_p(p)
    active = rng.random((bs.R, L)) < p
    return rng.standard_normal((bs.N, L)) * active[bs.labels]


def transmit(A: np.ndarray, x: Union[Message, np.ndarray]) -> np.ndarray:
    """Noiseless channel output ``A @ x`` (``x`` may hold snapshots as columns)."""
    values = x.values if isinstance(x, Message) else np.asarray(x, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or values.shape[0] != A.shape[1]:
        raise DimensionError(f"channel of shape {A.shape} cannot carry a message of length {values.shape[0]}")
    return A @ values


def _smallest_divisor_at_least(N: int, lower: int) -> int:
    for d in range(max(lower, 1), N + 1):
        if N % d == 0:
            return d
    return N


def select_params(M: int, N: int, alpha: float, d_min: int = 2) -> ProtocolParams:
    """Pick ``p = M/(alpha N)`` and the smallest block size dividing N with
    ``d >= max(ceil(M/(alpha N)), d_min)``."""
    if alpha <= 1:
        raise IdentifiabilityError(f"the determinantal ratio must exceed 1, got {alpha}")
    if M >= N:
        raise ParameterError(f"the channel must be underdetermined (M < N), got M={M}, N={N}")
    p = M / (alpha * N)
    if p > 1:
        raise ParameterError(f"alpha={alpha} gives activation probability {p} > 1")
    d = _smallest_divisor_at_least(N, max(math.ceil(M / (alpha * N)), d_min))
    return ProtocolParams(N=N, M=M, d=d, p=p)
