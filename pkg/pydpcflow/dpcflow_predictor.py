#!/usr/bin/env python3
"""
DPC Flow Predictor

This module keeps the sliding input/output data window of a data-driven
predictive controller, turns (possibly truncated) factorizations of the
stacked past/future data matrix into the predictor coefficient matrices,
computes the unconstrained predictive control sequence and bounds the effect
of truncation on all of them.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property
import logging
from typing import Protocol

import numpy as np
import scipy.linalg

from .dpcflow_linalg import (
    PINV_RTOL,
    DimensionError,
    SvdFactors,
    TruncationPolicy,
    do_truncate,
    parallel_svd_by_cols,
    svd_dense,
)

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-12


class NeedsMoreDataError(ValueError):
    def __init__(self, needed: int, available: int):
        super().__init__(f"Need {needed} samples, have {available} ({needed - available} remaining)")
        self.needed = needed
        self.available = available
        self.remaining = needed - available


class NumericalError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, float]):
        details = ", ".join(f"{key}={value:.6g}" for key, value in diagnostics.items())
        super().__init__(f"{message} ({details})")
        self.diagnostics = diagnostics


def window_length(n_horizon: int, j_cols: int) -> int:
    return 2 * n_horizon + j_cols - 1


def _as_samples(samples: np.ndarray) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"Samples must be a sequence of vectors, got shape {arr.shape}")
    return arr


def _block_hankel(samples: np.ndarray, start: int, block_rows: int, cols: int) -> np.ndarray:
    """Block row r, column c holds samples[start + r + c]"""
    index = scipy.linalg.hankel(np.arange(block_rows), np.arange(block_rows - 1, block_rows + cols - 1))
    blocks = samples[start + index]  # (block_rows, cols, dim)
    return blocks.transpose(0, 2, 1).reshape(block_rows * samples.shape[1], cols)


@dataclasses.dataclass(frozen=True)
class HankelSet:
    """Snapshot of the last 2N + j - 1 (u(t), y(t + 1)) pairs and the Hankel matrices over them"""

    n_horizon: int
    j_cols: int
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        inputs = _as_samples(self.inputs).copy()
        outputs = _as_samples(self.outputs).copy()
        expected = window_length(self.n_horizon, self.j_cols)
        if inputs.shape[0] != expected or outputs.shape[0] != expected:
            raise DimensionError(
                f"HankelSet window holds {inputs.shape[0]} inputs and {outputs.shape[0]} outputs, expected {expected}"
            )
        inputs.setflags(write=False)
        outputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def output_dim(self) -> int:
        return int(self.outputs.shape[1])

    @property
    def past_rows(self) -> int:
        """Row count of w_p, i.e. the column count of l_w"""
        return (self.output_dim + self.input_dim) * self.n_horizon

    @cached_property
    def u_p(self) -> np.ndarray:
        return _block_hankel(self.inputs, 0, self.n_horizon, self.j_cols)

    @cached_property
    def u_f(self) -> np.ndarray:
        return _block_hankel(self.inputs, self.n_horizon, self.n_horizon, self.j_cols)

    @cached_property
    def y_p(self) -> np.ndarray:
        return _block_hankel(self.outputs, 0, self.n_horizon, self.j_cols)

    @cached_property
    def y_f(self) -> np.ndarray:
        return _block_hankel(self.outputs, self.n_horizon, self.n_horizon, self.j_cols)

    @property
    def w_p(self) -> np.ndarray:
        return np.vstack([self.y_p, self.u_p])

    @cached_property
    def v_p(self) -> np.ndarray:
        return np.vstack([self.y_p, self.u_p, self.u_f])

    def v_p_columns(self, start: int, stop: int) -> np.ndarray:
        """Columns [start, stop) of v_p, built from the samples they touch only"""
        if not 0 <= start < stop <= self.j_cols:
            raise DimensionError(f"Column range [{start}, {stop}) outside 0..{self.j_cols}")
        width = stop - start
        n = self.n_horizon
        return np.vstack(
            [
                _block_hankel(self.outputs, start, n, width),
                _block_hankel(self.inputs, start, n, width),
                _block_hankel(self.inputs, start + n, n, width),
            ]
        )

    def w_p_now(self) -> np.ndarray:
        """[y(k-N+1); ...; y(k); u(k-N); ...; u(k-1)] for the newest pair (u(k-1), y(k))"""
        n = self.n_horizon
        return np.concatenate([self.outputs[-n:].reshape(-1), self.inputs[-n:].reshape(-1)])


def hankel_build(inputs: np.ndarray, outputs: np.ndarray, n_horizon: int, j_cols: int) -> HankelSet:
    """Hankel set over the newest 2N + j - 1 pairs; outputs[i] is y(i + 1)"""
    if n_horizon < 1 or j_cols < 1:
        raise ValueError(f"N and j must be >= 1, got N={n_horizon}, j={j_cols}")
    inputs = _as_samples(inputs)
    outputs = _as_samples(outputs)
    if inputs.shape[0] != outputs.shape[0]:
        raise DimensionError(f"{inputs.shape[0]} inputs do not pair with {outputs.shape[0]} outputs")
    needed = window_length(n_horizon, j_cols)
    if inputs.shape[0] < needed:
        raise NeedsMoreDataError(needed, inputs.shape[0])
    return HankelSet(n_horizon, j_cols, inputs[-needed:], outputs[-needed:])


def hankel_slide(h: HankelSet, u_new: np.ndarray, y_new: np.ndarray) -> HankelSet:
    u_new = np.asarray(u_new, dtype=float).reshape(-1)
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    if u_new.size != h.input_dim or y_new.size != h.output_dim:
        raise DimensionError(
            f"New sample has {u_new.size} inputs and {y_new.size} outputs, window expects {h.input_dim} and {h.output_dim}"
        )
    return HankelSet(
        h.n_horizon,
        h.j_cols,
        np.vstack([h.inputs[1:], u_new]),
        np.vstack([h.outputs[1:], y_new]),
    )


@dataclasses.dataclass(frozen=True)
class CloudParams:
    l_w: np.ndarray
    l_u: np.ndarray
    output_dim: int
    input_dim: int
    retained_rank: int
    degenerate: bool = False

    @property
    def a_hat_row(self) -> np.ndarray:
        return self.l_w[: self.output_dim].copy()

    @property
    def b_hat_row(self) -> np.ndarray:
        return self.l_u[: self.output_dim].copy()

    @property
    def b_hat(self) -> np.ndarray:
        return self.l_u[: self.output_dim, : self.input_dim].copy()


class SvdProvider(Protocol):
    def __call__(self, v_p: np.ndarray, policy: TruncationPolicy) -> SvdFactors: ...


class DenseSvdProvider:
    """Single-process reference path"""

    def __call__(self, v_p: np.ndarray, policy: TruncationPolicy) -> SvdFactors:
        return do_truncate(svd_dense(v_p), policy)


class ParallelSvdProvider:
    """Column-partitioned path with merge-and-truncate reduction"""

    def __init__(self, col: int):
        self.col = col

    def __call__(self, v_p: np.ndarray, policy: TruncationPolicy) -> SvdFactors:
        return parallel_svd_by_cols(v_p, self.col, policy)


def coefficient_matrices(
    h: HankelSet, v_p_pinv: np.ndarray, retained_rank: int, degenerate: bool = False
) -> CloudParams:
    coefficients = h.y_f @ v_p_pinv
    return CloudParams(
        l_w=coefficients[:, : h.past_rows],
        l_u=coefficients[:, h.past_rows :],
        output_dim=h.output_dim,
        input_dim=h.input_dim,
        retained_rank=retained_rank,
        degenerate=degenerate,
    )


def coefficient_flops(h: HankelSet, k: int) -> int:
    """(y_f N) S^-1 M^T with rank-k factors"""
    rows = h.past_rows + h.input_dim * h.n_horizon
    out_rows = h.output_dim * h.n_horizon
    return 2 * out_rows * h.j_cols * k + 2 * out_rows * k * rows


def control_flops(h: HankelSet) -> int:
    """Gram matrix, right-hand side and Cholesky solve of control_sequence"""
    out_rows = h.output_dim * h.n_horizon
    u_rows = h.input_dim * h.n_horizon
    return 2 * u_rows * u_rows * out_rows + 2 * out_rows * (h.past_rows + u_rows) + u_rows**3 // 3 + 2 * u_rows * u_rows


def cloud_params_from_factors(h: HankelSet, factors: SvdFactors) -> CloudParams:
    """Coefficients y_f N S^-1 M^T, multiplied in the order that keeps every product rank-sized"""
    rows = h.past_rows + h.input_dim * h.n_horizon
    if factors.rows != rows or factors.cols != h.j_cols:
        raise DimensionError(f"Factors of a {factors.rows}x{factors.cols} matrix do not match v_p ({rows}, {h.j_cols})")
    if factors.degenerate:
        logger.warning(f"Degenerate factors for v_p ({rows}, {h.j_cols}), coefficients carry k={factors.rank}")
    r = inverted_rank(factors)
    projected = (h.y_f @ factors.n_right[:, :r]) / factors.s[:r]
    coefficients = projected @ factors.m_left[:, :r].T
    return CloudParams(
        l_w=coefficients[:, : h.past_rows],
        l_u=coefficients[:, h.past_rows :],
        output_dim=h.output_dim,
        input_dim=h.input_dim,
        retained_rank=factors.rank,
        degenerate=factors.degenerate,
    )


def compute_cloud_params(
    h: HankelSet, policy: TruncationPolicy, svd: SvdProvider | None = None
) -> CloudParams:
    provider = svd if svd is not None else DenseSvdProvider()
    factors = provider(h.v_p, policy)
    logger.debug(f"v_p {h.v_p.shape} retained rank {factors.rank}")
    return cloud_params_from_factors(h, factors)


def control_sequence(params: CloudParams, w_p_now: np.ndarray, r_f: np.ndarray, lam: float) -> np.ndarray:
    """Minimizer of |r_f - l_w w_p - l_u u_f|^2 + lam |u_f|^2 via a Cholesky solve"""
    if lam < 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    lam = max(lam, LAMBDA_FLOOR)
    w_p_now = np.asarray(w_p_now, dtype=float).reshape(-1)
    r_f = np.asarray(r_f, dtype=float).reshape(-1)
    if w_p_now.size != params.l_w.shape[1] or r_f.size != params.l_w.shape[0]:
        raise DimensionError(
            f"w_p has {w_p_now.size} entries and r_f {r_f.size}, coefficients expect {params.l_w.shape[::-1]}"
        )
    l_u = params.l_u
    gram = l_u.T @ l_u + lam * np.eye(l_u.shape[1])
    rhs = l_u.T @ (r_f - params.l_w @ w_p_now)
    try:
        u_f = scipy.linalg.cho_solve(scipy.linalg.cho_factor(gram), rhs)
    except np.linalg.LinAlgError as err:
        raise NumericalError("Control Gram matrix is not positive-definite", {"lambda": lam}) from err
    if not np.all(np.isfinite(u_f)):
        raise NumericalError(
            "Control sequence is not finite",
            {"lambda": lam, "norm_l_u": float(np.linalg.norm(l_u)), "norm_rhs": float(np.linalg.norm(rhs))},
        )
    return u_f


def predict_outputs(params: CloudParams, w_p: np.ndarray, u_f: np.ndarray) -> np.ndarray:
    return params.l_w @ np.asarray(w_p, dtype=float).reshape(-1) + params.l_u @ np.asarray(u_f, dtype=float).reshape(-1)


@dataclasses.dataclass(frozen=True)
class ErrorBudget:
    """Truncation error bounds.

    alpha and beta are the spectral norms of the w_p rows and the u_f rows of
    the discarded left singular vectors. Those vectors are orthonormal, so
    alpha^2 + beta^2 >= 1 with equality when one direction is discarded;
    with several, each norm can reach 1 on its own.
    """

    eps2: float
    eps3: float
    eps4: float
    alpha: float
    beta: float
    s_min: float
    s_min_exact: bool
    numeric_rank: int
    kept_rank: int

    def __post_init__(self):
        if min(self.eps2, self.eps3, self.eps4) < 0:
            raise ValueError("Error bounds must be non-negative")
        if self.kept_rank < self.numeric_rank and self.alpha**2 + self.beta**2 < 1.0 - 1e-9:
            raise ValueError(
                f"Row-block norms of orthonormal directions need alpha^2 + beta^2 >= 1, got {self.alpha}, {self.beta}"
            )


def inverted_rank(f: SvdFactors) -> int:
    """How many singular values pseudo_inverse_from_factors actually inverts"""
    if f.rank == 0 or f.s[0] <= 0.0:
        return 0
    return int(np.count_nonzero(f.s >= f.s[0] * PINV_RTOL))


def error_budget(
    h: HankelSet,
    full: SvdFactors,
    k: int,
    params_hat: CloudParams,
    u_f_hat: np.ndarray,
    r_f: np.ndarray,
    w_p_now: np.ndarray,
    lam: float,
    s_min: float | None = None,
) -> ErrorBudget:
    """Bounds on the coefficient and control errors caused by keeping k of the r inverted singular values"""
    r = inverted_rank(full)
    s_min_exact = s_min is None
    if s_min is None:
        s_min = float(full.s[r - 1]) if r else 0.0
    if k >= r:
        return ErrorBudget(0.0, 0.0, 0.0, 0.0, 0.0, s_min, s_min_exact, r, k)
    if s_min <= 0.0:
        raise ValueError(f"s_min must be positive, got {s_min}")

    discarded = full.m_left[:, k:r]
    alpha = float(np.linalg.norm(discarded[: h.past_rows], 2))
    beta = float(np.linalg.norm(discarded[h.past_rows :], 2))
    scale = (r - k) * float(np.linalg.norm(h.y_f, 2)) / s_min
    eps2 = alpha * scale
    eps3 = beta * scale

    norm_lu = float(np.linalg.norm(params_hat.l_u, 2))
    norm_lw = float(np.linalg.norm(params_hat.l_w, 2))
    lam = max(lam, LAMBDA_FLOOR)
    eps4 = (
        (2 * eps3 * norm_lu + eps3**2) * float(np.linalg.norm(u_f_hat))
        + eps3 * float(np.linalg.norm(r_f))
        + (eps2 * norm_lu + eps3 * norm_lw + eps2 * eps3) * float(np.linalg.norm(w_p_now))
    ) / lam
    return ErrorBudget(eps2, eps3, eps4, alpha, beta, s_min, s_min_exact, r, k)
