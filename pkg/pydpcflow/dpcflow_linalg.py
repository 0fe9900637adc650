#!/usr/bin/env python3
"""
DPC Flow Linear Algebra Layer

This module holds the dense and column-partitioned truncated SVD used by the
cloud controller, the merge-and-truncate reduction, the truncated
pseudo-inverse, the flop model for partitioned SVD and the iterative discrete
Lyapunov and Riccati solvers used by the observer and the warm-up controllers.
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import Executor
import dataclasses
import enum
from fractions import Fraction
import logging
import math

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

MACHINE_EPS = float(np.finfo(float).eps)  # 2.2e-16
PINV_RTOL = 1e-13
LYAPUNOV_TOL = 1e-12
LYAPUNOV_MAX_ITER = 10_000
RICCATI_TOL = 1e-10
RICCATI_MAX_ITER = 100_000


class DimensionError(ValueError):
    """Operand shapes do not line up"""


class ObserverInstabilityError(ValueError):
    """The iteration matrix has spectral radius >= 1"""

    def __init__(self, spectral_radius: float):
        super().__init__(f"Spectral radius {spectral_radius:.6g} >= 1, no Lyapunov solution")
        self.spectral_radius = spectral_radius


class RiccatiDivergenceError(RuntimeError):
    """Backward Riccati iteration did not settle"""


class TruncationMode(enum.Enum):
    RELATIVE_PRECISION = "relative-precision"
    FIXED_COUNT = "fixed-count"
    RANK_ONLY = "rank-only"


_MODE_CODES = {
    TruncationMode.RELATIVE_PRECISION: 0.0,
    TruncationMode.FIXED_COUNT: 1.0,
    TruncationMode.RANK_ONLY: 2.0,
}


@dataclasses.dataclass(frozen=True)
class TruncationPolicy:
    mode: TruncationMode = TruncationMode.RANK_ONLY
    epsilon1: float = 1e-15
    keep_count: int = 1

    def __post_init__(self):
        if not 0.0 < self.epsilon1 <= 1.0:
            raise ValueError(f"epsilon1 must be in (0, 1], got {self.epsilon1}")
        if self.mode == TruncationMode.FIXED_COUNT and self.keep_count < 1:
            raise ValueError(f"keep_count must be >= 1 for fixed-count truncation, got {self.keep_count}")

    @classmethod
    def rank_only(cls) -> TruncationPolicy:
        return cls(TruncationMode.RANK_ONLY)

    @classmethod
    def relative(cls, epsilon1: float) -> TruncationPolicy:
        return cls(TruncationMode.RELATIVE_PRECISION, epsilon1=epsilon1)

    @classmethod
    def fixed(cls, keep_count: int) -> TruncationPolicy:
        return cls(TruncationMode.FIXED_COUNT, keep_count=keep_count)

    def to_vector(self) -> np.ndarray:
        """Flat float encoding used when the policy travels inside a frame"""
        return np.array([_MODE_CODES[self.mode], self.epsilon1, float(self.keep_count)])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> TruncationPolicy:
        code, epsilon1, keep_count = (float(v) for v in np.ravel(vec))
        for mode, mode_code in _MODE_CODES.items():
            if mode_code == code:
                return cls(mode, epsilon1=epsilon1, keep_count=int(keep_count))
        raise ValueError(f"Unknown truncation mode code {code}")


@dataclasses.dataclass(frozen=True)
class SvdFactors:
    """Thin factorization m_left @ diag(s) @ n_right.T, possibly truncated"""

    m_left: np.ndarray
    s: np.ndarray
    n_right: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        m_left = np.array(self.m_left, dtype=float, ndmin=2)
        s = np.array(self.s, dtype=float, ndmin=1)
        n_right = np.array(self.n_right, dtype=float, ndmin=2)
        if m_left.shape[1] != s.size or n_right.shape[1] != s.size:
            raise DimensionError(
                f"Factor shapes {m_left.shape}, {s.shape}, {n_right.shape} disagree on the retained rank"
            )
        if np.any(s < 0):
            raise ValueError("Singular values must be non-negative")
        if s.size > 1 and np.any(np.diff(s) > 1e-12 * max(s[0], 1.0)):
            raise ValueError("Singular values must be sorted descending")
        for arr in (m_left, s, n_right):
            arr.setflags(write=False)
        object.__setattr__(self, "m_left", m_left)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "n_right", n_right)

    @property
    def rank(self) -> int:
        return int(self.s.size)

    @property
    def rows(self) -> int:
        return int(self.m_left.shape[0])

    @property
    def cols(self) -> int:
        return int(self.n_right.shape[0])

    @property
    def element_count(self) -> int:
        return int(self.m_left.size + self.s.size + self.n_right.size)

    def reconstruct(self) -> np.ndarray:
        return (self.m_left * self.s) @ self.n_right.T


@dataclasses.dataclass(frozen=True)
class FlopEstimate:
    total_flops: int
    per_block_flops: int
    merge_flops: int
    n_blocks: int
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.total_flops < self.bound


def _zero_factors(rows: int, cols: int) -> SvdFactors:
    m_left = np.zeros((rows, 1))
    m_left[0, 0] = 1.0
    n_right = np.zeros((cols, 1))
    n_right[0, 0] = 1.0
    return SvdFactors(m_left, np.zeros(1), n_right, degenerate=True)


def _canonical_signs(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so the largest-magnitude entry of each left vector is non-negative"""
    if u.size == 0:
        return u, v
    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, v * signs


def _thin_svd(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        u, s, vh = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except np.linalg.LinAlgError:
        logger.debug(f"gesdd did not converge on a {a.shape} block, retrying with gesvd")
        u, s, vh = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd", check_finite=False)
    u, v = _canonical_signs(u, vh.T)
    return u, s, v


def svd_dense(a: np.ndarray) -> SvdFactors:
    """Full thin SVD of a finite, non-empty matrix"""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"svd_dense needs a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("svd_dense input contains non-finite entries")
    if not np.any(a):
        logger.debug(f"Zero {a.shape} matrix, returning degenerate rank-1 factors")
        return _zero_factors(*a.shape)
    u, s, v = _thin_svd(a)
    return SvdFactors(u, s, v)


def retained_count(f: SvdFactors, policy: TruncationPolicy) -> int:
    """Number of leading singular triplets the policy keeps, 0 when nothing survives"""
    if f.rank == 0:
        return 0
    s_max = float(f.s[0])
    if s_max <= 0.0:
        return 0
    if policy.mode == TruncationMode.RANK_ONLY:
        threshold = s_max * max(f.rows, f.cols) * MACHINE_EPS
        return int(np.count_nonzero(f.s > threshold))
    if policy.mode == TruncationMode.RELATIVE_PRECISION:
        return int(np.count_nonzero(f.s >= s_max * policy.epsilon1))
    return min(policy.keep_count, f.rank)


def do_truncate(f: SvdFactors, policy: TruncationPolicy) -> SvdFactors:
    k = retained_count(f, policy)
    degenerate = f.degenerate
    if k == 0:
        logger.debug(f"No singular value of a {f.rows}x{f.cols} block passes {policy.mode.value}, keeping one")
        k = 1
        degenerate = True
    if k == f.rank and degenerate == f.degenerate:
        return f
    return SvdFactors(f.m_left[:, :k], f.s[:k], f.n_right[:, :k], degenerate=degenerate)


def block_merge(f1: SvdFactors, f2: SvdFactors, policy: TruncationPolicy) -> SvdFactors:
    """Factors of the column concatenation [A1 A2] from the truncated factors of each block"""
    if f1.rows != f2.rows:
        raise DimensionError(f"Cannot merge blocks with {f1.rows} and {f2.rows} rows")
    parts = (do_truncate(f1, policy), do_truncate(f2, policy))
    live = [part for part in parts if part.s[0] > 0.0]
    if not live:
        return _zero_factors(f1.rows, f1.cols + f2.cols)

    u, s, v_tilde = _thin_svd(np.hstack([part.m_left * part.s for part in live]))

    # right factor: blkdiag(V1k, V2l) @ v_tilde, zero rows for an all-zero block
    right_blocks = []
    offset = 0
    for part in parts:
        if part.s[0] > 0.0:
            right_blocks.append(part.n_right @ v_tilde[offset : offset + part.rank])
            offset += part.rank
        else:
            right_blocks.append(np.zeros((part.cols, v_tilde.shape[1])))
    return SvdFactors(u, s, np.vstack(right_blocks))


def do_merge_of_blocks(blocks: Sequence[SvdFactors], policy: TruncationPolicy) -> SvdFactors:
    """Pairwise reduction, one level at a time; an odd block out is carried to the next level"""
    if not blocks:
        raise ValueError("Nothing to merge")
    pending = list(blocks)
    levels = math.ceil(math.log2(len(pending))) if len(pending) > 1 else 0
    for level in range(levels):
        merged = [block_merge(pending[i], pending[i + 1], policy) for i in range(0, len(pending) - 1, 2)]
        if len(pending) % 2:
            merged.append(pending[-1])
        logger.debug(f"Merge level {level + 1}: {len(pending)} -> {len(merged)} blocks")
        pending = merged
    return pending[0]


def block_count(n: int, col: int) -> int:
    """round(n/col + 0.45) with round-half-up, at least one block"""
    if col < 1:
        raise ValueError(f"Column block width must be >= 1, got {col}")
    return max(1, math.floor(n / col + 0.45 + 0.5))


def column_blocks(n: int, col: int) -> list[tuple[int, int]]:
    """Half-open column ranges of width col; the last block takes whatever remains"""
    count = block_count(n, col)
    starts = [i * col for i in range(count)]
    return [(start, stop) for start, stop in zip(starts, [*starts[1:], n], strict=True)]


def parallel_svd_by_cols(
    a: np.ndarray,
    col: int,
    policy: TruncationPolicy,
    executor: Executor | None = None,
) -> SvdFactors:
    """Truncated SVD of a from independent column-block SVDs and a merge reduction"""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise DimensionError(f"parallel_svd_by_cols needs a non-empty 2-D matrix, got shape {a.shape}")
    ranges = column_blocks(a.shape[1], col)
    logger.debug(f"Splitting {a.shape} into {len(ranges)} column blocks of width {col}")

    def leaf(bounds: tuple[int, int]) -> SvdFactors:
        return do_truncate(svd_dense(a[:, bounds[0] : bounds[1]]), policy)

    if executor is None:
        blocks = [leaf(bounds) for bounds in ranges]
    else:
        blocks = list(executor.map(leaf, ranges))  # map keeps submission order
    return do_truncate(do_merge_of_blocks(blocks, policy), policy)


def pseudo_inverse_from_factors(f: SvdFactors) -> np.ndarray:
    """N @ inv(S) @ M.T over the singular values above s_max * 1e-13"""
    if f.rank == 0:
        raise ValueError("Cannot invert empty factors")
    s_max = float(f.s[0])
    keep = (f.s > 0.0) & (f.s >= s_max * PINV_RTOL)
    if not np.any(keep):
        return np.zeros((f.cols, f.rows))
    return (f.n_right[:, keep] / f.s[keep]) @ f.m_left[:, keep].T


def svd_flops(rows: int, cols: int) -> int:
    """Single-block cost 6 m n^2 + 16 n^3, the one-partition case of flop_estimate"""
    return 6 * rows * cols * cols + 16 * cols**3


def merge_flops(rows: int, k: int) -> int:
    return 6 * rows * k * k + 176 * k**3


def flop_estimate(m: int, n: int, n_blocks: int, k: int) -> FlopEstimate:
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    s = Fraction(n, n_blocks)
    per_block = round(6 * m * s * s + 16 * s**3)
    merge = merge_flops(m, k)
    total = n_blocks * per_block + (n_blocks - 1) * merge
    bound = 12 * m * n * n / n_blocks + 192 * n**3 / n_blocks**2
    return FlopEstimate(
        total_flops=total, per_block_flops=per_block, merge_flops=merge, n_blocks=n_blocks, bound=bound
    )


def spectral_radius(h: np.ndarray) -> float:
    h = np.atleast_2d(np.asarray(h, dtype=float))
    return float(np.max(np.abs(np.linalg.eigvals(h))))


def solve_discrete_lyapunov(h: np.ndarray | float, q: np.ndarray | float) -> np.ndarray:
    """P with h.T @ P @ h - P = -q by fixed-point iteration"""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if h.shape[0] != h.shape[1] or q.shape != h.shape:
        raise DimensionError(f"Lyapunov operands must be square and equal in size, got {h.shape} and {q.shape}")
    if not np.allclose(q, q.T) or np.min(np.linalg.eigvalsh(q)) <= 0.0:
        raise ValueError("q must be symmetric positive-definite")
    radius = spectral_radius(h)
    if radius >= 1.0:
        raise ObserverInstabilityError(radius)

    p = q.copy()
    for iteration in range(LYAPUNOV_MAX_ITER):
        p_next = h.T @ p @ h + q
        step = float(np.linalg.norm(p_next - p))
        p = p_next
        if step < LYAPUNOV_TOL:
            logger.debug(f"Lyapunov iteration settled after {iteration + 1} steps")
            break
    else:
        logger.warning(f"Lyapunov iteration hit {LYAPUNOV_MAX_ITER} steps (spectral radius {radius:.6g})")
    return (p + p.T) / 2


def solve_discrete_riccati(a: np.ndarray, b: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Steady-state P of the discrete LQR Riccati recursion, iterated backward from P = q"""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(a.shape[0], -1)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    r = np.atleast_2d(np.asarray(r, dtype=float))
    if q.shape != a.shape or r.shape != (b.shape[1], b.shape[1]):
        raise DimensionError(f"Riccati weights {q.shape}, {r.shape} do not match a {a.shape}, b {b.shape}")

    p = q.copy()
    for iteration in range(RICCATI_MAX_ITER):
        pb = p @ b
        gain = scipy.linalg.solve(r + b.T @ pb, pb.T @ a, assume_a="pos")  # may raise
        p_next = q + a.T @ p @ a - a.T @ pb @ gain
        p_next = (p_next + p_next.T) / 2
        if not np.all(np.isfinite(p_next)):
            raise RiccatiDivergenceError(f"Riccati iterate became non-finite at step {iteration + 1}")
        step = float(np.linalg.norm(p_next - p))
        p = p_next
        if step < RICCATI_TOL * max(1.0, float(np.linalg.norm(p))):
            logger.debug(f"Riccati iteration settled after {iteration + 1} steps")
            return p
    raise RiccatiDivergenceError(f"Riccati iteration did not settle within {RICCATI_MAX_ITER} steps")
