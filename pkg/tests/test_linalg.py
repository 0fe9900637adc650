"""Tests for the SVD, merge, pseudo-inverse, flop model and iterative solvers"""

from itertools import pairwise

import numpy as np
import pytest
import scipy.linalg

from pydpcflow import (
    DimensionError,
    ObserverInstabilityError,
    SvdFactors,
    TruncationMode,
    TruncationPolicy,
    block_merge,
    column_blocks,
    do_merge_of_blocks,
    do_truncate,
    flop_estimate,
    merge_flops,
    parallel_svd_by_cols,
    pseudo_inverse_from_factors,
    solve_discrete_lyapunov,
    solve_discrete_riccati,
    svd_dense,
    svd_flops,
)
from pydpcflow.dpcflow_linalg import block_count, retained_count

from .test_fixtures import (
    FLOP_CASE,
    FLOP_CASE_BOUND,
    FLOP_CASE_MERGE,
    FLOP_CASE_PER_BLOCK,
    FLOP_CASE_TOTAL,
    SEED,
)


def well_conditioned(rng: np.random.Generator, rows: int, cols: int, rank: int) -> np.ndarray:
    """rows x cols matrix with exactly `rank` singular values in [1, 10]"""
    u, _ = np.linalg.qr(rng.standard_normal((rows, rank)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, rank)))
    return (u * rng.uniform(1.0, 10.0, size=rank)) @ v.T


def test_svd_dense_reconstructs():
    rng = np.random.default_rng(SEED)
    a = rng.standard_normal((12, 30))
    f = svd_dense(a)

    assert f.rank == 12
    assert f.rows == 12 and f.cols == 30
    np.testing.assert_allclose(f.reconstruct(), a, atol=1e-12)
    np.testing.assert_allclose(f.s, np.linalg.svd(a, compute_uv=False), rtol=1e-12)


def test_svd_dense_sign_convention():
    """Largest-magnitude entry of each left vector is non-negative"""
    f = svd_dense(np.random.default_rng(SEED).standard_normal((6, 9)))
    pivots = f.m_left[np.argmax(np.abs(f.m_left), axis=0), np.arange(f.rank)]
    assert np.all(pivots >= 0)


def test_svd_dense_rejects_bad_input():
    with pytest.raises(DimensionError):
        svd_dense(np.zeros((0, 3)))
    with pytest.raises(DimensionError):
        svd_dense(np.zeros(4))
    with pytest.raises(ValueError):
        svd_dense(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_svd_dense_zero_matrix_is_degenerate():
    f = svd_dense(np.zeros((4, 7)))
    assert f.degenerate
    assert f.rank == 1
    assert f.s[0] == 0.0
    np.testing.assert_array_equal(f.reconstruct(), np.zeros((4, 7)))


def test_factors_validation():
    with pytest.raises(DimensionError):
        SvdFactors(np.eye(3), np.ones(3), np.ones((5, 2)))
    with pytest.raises(ValueError):
        SvdFactors(np.eye(2), np.array([1.0, 2.0]), np.eye(2))
    with pytest.raises(ValueError):
        SvdFactors(np.eye(2), np.array([1.0, -1.0]), np.eye(2))


def test_factors_are_read_only():
    f = svd_dense(np.eye(3))
    with pytest.raises(ValueError):
        f.s[0] = 5.0


def test_policy_validation_and_vector_form():
    with pytest.raises(ValueError):
        TruncationPolicy.relative(0.0)
    with pytest.raises(ValueError):
        TruncationPolicy.fixed(0)

    policy = TruncationPolicy.fixed(7)
    assert TruncationPolicy.from_vector(policy.to_vector()) == policy
    with pytest.raises(ValueError):
        TruncationPolicy.from_vector(np.array([9.0, 1e-3, 1.0]))


@pytest.mark.parametrize(
    "policy,expected",
    [
        (TruncationPolicy.rank_only(), 3),
        (TruncationPolicy.relative(1e-2), 2),
        (TruncationPolicy.relative(0.5), 1),
        (TruncationPolicy.fixed(2), 2),
        (TruncationPolicy.fixed(10), 4),
    ],
)
def test_retained_count(policy, expected):
    f = SvdFactors(np.eye(4), np.array([10.0, 1.0, 0.05, 1e-17]), np.eye(4))
    assert retained_count(f, policy) == expected
    assert do_truncate(f, policy).rank == expected


def test_truncate_keeps_leading_triplets():
    rng = np.random.default_rng(SEED)
    f = svd_dense(rng.standard_normal((8, 20)))
    g = do_truncate(f, TruncationPolicy.fixed(3))

    np.testing.assert_array_equal(g.s, f.s[:3])
    np.testing.assert_array_equal(g.m_left, f.m_left[:, :3])
    np.testing.assert_array_equal(g.n_right, f.n_right[:, :3])
    assert not g.degenerate


def test_truncate_never_empties():
    f = SvdFactors(np.eye(2), np.array([1e-300, 0.0]), np.eye(2))
    g = do_truncate(f, TruncationPolicy.relative(1.0))
    assert g.rank >= 1

    zero = do_truncate(svd_dense(np.zeros((3, 3))), TruncationPolicy.rank_only())
    assert zero.rank == 1
    assert zero.degenerate


def test_block_merge_matches_concatenation():
    rng = np.random.default_rng(SEED)
    a1 = rng.standard_normal((10, 15))
    a2 = rng.standard_normal((10, 12))
    merged = block_merge(svd_dense(a1), svd_dense(a2), TruncationPolicy.rank_only())

    np.testing.assert_allclose(merged.s, np.linalg.svd(np.hstack([a1, a2]), compute_uv=False), rtol=1e-10)
    np.testing.assert_allclose(merged.reconstruct(), np.hstack([a1, a2]), atol=1e-10)
    assert merged.cols == 27


def test_block_merge_with_zero_block():
    rng = np.random.default_rng(SEED)
    a1 = rng.standard_normal((5, 6))
    merged = block_merge(svd_dense(a1), svd_dense(np.zeros((5, 4))), TruncationPolicy.rank_only())

    np.testing.assert_allclose(merged.reconstruct(), np.hstack([a1, np.zeros((5, 4))]), atol=1e-12)
    assert not merged.degenerate


def test_block_merge_row_mismatch():
    with pytest.raises(DimensionError):
        block_merge(svd_dense(np.eye(3)), svd_dense(np.eye(4)), TruncationPolicy.rank_only())


def test_merge_of_blocks_odd_count():
    rng = np.random.default_rng(SEED)
    blocks = [rng.standard_normal((6, 4)) for _ in range(5)]
    merged = do_merge_of_blocks([svd_dense(b) for b in blocks], TruncationPolicy.rank_only())

    np.testing.assert_allclose(merged.reconstruct(), np.hstack(blocks), atol=1e-10)

    with pytest.raises(ValueError):
        do_merge_of_blocks([], TruncationPolicy.rank_only())


@pytest.mark.parametrize(
    "n,col,expected",
    [
        (1000, 100, 10),
        (1004, 100, 10),
        (1010, 100, 11),
        (50, 100, 1),
        (10, 100, 1),
    ],
)
def test_block_count(n, col, expected):
    assert block_count(n, col) == expected


def test_column_blocks_cover_every_column():
    ranges = column_blocks(1004, 100)
    assert ranges[0] == (0, 100)
    assert ranges[-1] == (900, 1004)
    assert sum(stop - start for start, stop in ranges) == 1004

    with pytest.raises(ValueError):
        column_blocks(10, 0)


def test_parallel_svd_matches_dense():
    """Singular values and pseudo-inverse agree with the dense path for assorted shapes and ranks"""
    rng = np.random.default_rng(SEED)
    policy = TruncationPolicy.rank_only()
    for _ in range(200):
        rows = int(rng.integers(2, 201))
        cols = int(rng.integers(2, 65))
        rank = int(rng.integers(1, min(rows, cols) + 1))
        col = int(rng.choice([8, 16, 20]))
        a = well_conditioned(rng, rows, cols, rank)

        parallel = parallel_svd_by_cols(a, col, policy)
        dense = do_truncate(svd_dense(a), policy)

        assert parallel.rank >= rank
        np.testing.assert_allclose(parallel.s[:rank], dense.s[:rank], atol=1e-8)
        np.testing.assert_allclose(
            pseudo_inverse_from_factors(parallel), pseudo_inverse_from_factors(dense), atol=1e-7
        )


def test_parallel_svd_with_executor():
    from concurrent.futures import ThreadPoolExecutor

    rng = np.random.default_rng(SEED)
    a = rng.standard_normal((12, 64))
    with ThreadPoolExecutor(max_workers=4) as pool:
        threaded = parallel_svd_by_cols(a, 16, TruncationPolicy.rank_only(), pool)
    serial = parallel_svd_by_cols(a, 16, TruncationPolicy.rank_only())

    np.testing.assert_array_equal(threaded.s, serial.s)


def test_pseudo_inverse_matches_numpy():
    rng = np.random.default_rng(SEED)
    a = well_conditioned(rng, 9, 14, 6)
    np.testing.assert_allclose(pseudo_inverse_from_factors(svd_dense(a)), np.linalg.pinv(a), atol=1e-10)


def test_pseudo_inverse_of_zero_factors():
    assert not np.any(pseudo_inverse_from_factors(svd_dense(np.zeros((3, 5)))))


def test_flop_estimate_hand_case():
    estimate = flop_estimate(**FLOP_CASE)

    assert estimate.per_block_flops == FLOP_CASE_PER_BLOCK
    assert estimate.merge_flops == FLOP_CASE_MERGE
    assert estimate.total_flops == FLOP_CASE_TOTAL
    assert estimate.bound == pytest.approx(FLOP_CASE_BOUND)
    assert estimate.within_bound


def test_flop_estimate_single_block():
    assert flop_estimate(40, 300, 1, 20).total_flops == svd_flops(40, 300)
    assert merge_flops(100, 20) == FLOP_CASE_MERGE
    with pytest.raises(ValueError):
        flop_estimate(40, 300, 0, 20)


def test_lyapunov_scalar():
    p = solve_discrete_lyapunov(0.5, 1.0)
    assert p[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-10)


def test_lyapunov_matrix_against_scipy():
    rng = np.random.default_rng(SEED)
    h = rng.standard_normal((4, 4))
    h *= 0.8 / np.max(np.abs(np.linalg.eigvals(h)))
    q = np.eye(4)

    p = solve_discrete_lyapunov(h, q)
    np.testing.assert_allclose(p, scipy.linalg.solve_discrete_lyapunov(h.T, q), rtol=1e-8, atol=1e-10)


def test_lyapunov_rejects_unstable_and_bad_q():
    with pytest.raises(ObserverInstabilityError) as exc:
        solve_discrete_lyapunov(1.2, 1.0)
    assert exc.value.spectral_radius == pytest.approx(1.2)

    with pytest.raises(ValueError):
        solve_discrete_lyapunov(0.5, -1.0)
    with pytest.raises(DimensionError):
        solve_discrete_lyapunov(np.eye(2) * 0.5, np.eye(3))


def test_riccati_scalar_golden_ratio():
    p = solve_discrete_riccati(1.0, 1.0, 1.0, 1.0)
    assert p[0, 0] == pytest.approx((1 + 5**0.5) / 2, rel=1e-8)


def test_riccati_against_scipy():
    rng = np.random.default_rng(SEED)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 2))
    q = np.eye(3) * 2.0
    r = np.eye(2)

    np.testing.assert_allclose(solve_discrete_riccati(a, b, q, r), scipy.linalg.solve_discrete_are(a, b, q, r), rtol=1e-6)


def test_riccati_dimension_check():
    with pytest.raises(DimensionError):
        solve_discrete_riccati(np.eye(2), np.ones((2, 1)), np.eye(3), np.eye(1))


def test_truncation_mode_values():
    assert [mode.value for mode in TruncationMode] == ["relative-precision", "fixed-count", "rank-only"]


def test_parallel_svd_matches_dense_for_every_block_width():
    rng = np.random.default_rng(SEED)
    a = well_conditioned(rng, 9, 24, 6)
    dense = do_truncate(svd_dense(a), TruncationPolicy.rank_only())
    for col in range(1, a.shape[1] + 1):
        parallel = parallel_svd_by_cols(a, col, TruncationPolicy.rank_only())

        np.testing.assert_allclose(parallel.s[:6], dense.s[:6], atol=1e-8)
        np.testing.assert_allclose(parallel.reconstruct(), a, atol=1e-8)


def test_merge_order_does_not_change_result():
    rng = np.random.default_rng(SEED)
    blocks = [rng.standard_normal((8, 5)) for _ in range(5)]
    factors = [svd_dense(b) for b in blocks]
    policy = TruncationPolicy.rank_only()

    left_fold = factors[0]
    for f in factors[1:]:
        left_fold = block_merge(left_fold, f, policy)
    tree = do_merge_of_blocks(factors, policy)

    np.testing.assert_allclose(left_fold.s, tree.s, atol=1e-8)
    np.testing.assert_allclose(left_fold.reconstruct(), tree.reconstruct(), atol=1e-8)


def test_tighter_truncation_never_keeps_fewer():
    rng = np.random.default_rng(SEED)
    u, _ = np.linalg.qr(rng.standard_normal((12, 12)))
    v, _ = np.linalg.qr(rng.standard_normal((48, 12)))
    a = (u * 10.0 ** -np.arange(12)) @ v.T
    # thresholds sit half a decade from every singular value
    epsilons = 10.0 ** -(np.arange(12) + 0.5)

    dense = [retained_count(svd_dense(a), TruncationPolicy.relative(eps)) for eps in epsilons]
    parallel = [parallel_svd_by_cols(a, 16, TruncationPolicy.relative(eps)).rank for eps in epsilons]

    assert dense == list(range(1, 13))
    assert all(tight >= loose for loose, tight in pairwise(parallel))
    assert parallel[0] >= 1


def test_fewer_kept_values_never_reduce_error():
    rng = np.random.default_rng(SEED)
    a = rng.standard_normal((10, 30))
    full = svd_dense(a)
    errors = [np.linalg.norm(a - do_truncate(full, TruncationPolicy.fixed(k)).reconstruct(), 2) for k in range(10, 0, -1)]

    assert errors[0] == pytest.approx(0.0, abs=1e-10)
    assert all(later >= earlier - 1e-12 for earlier, later in pairwise(errors))


def test_seven_columns_in_pairs():
    assert block_count(7, 2) == 4
    assert column_blocks(7, 2) == [(0, 2), (2, 4), (4, 6), (6, 7)]


def test_flop_estimate_over_partition_counts():
    # k = s: the 176 k^3 merge term outweighs the split at N = 2
    totals = [flop_estimate(256, 256, n_blocks, 256 // n_blocks).total_flops for n_blocks in (1, 2, 4, 8)]
    assert totals == [369_098_752, 511_705_088, 199_229_440, 68_157_440]

    bounds = [flop_estimate(256, 256, n_blocks, 256 // n_blocks).bound for n_blocks in (1, 2, 4, 8)]
    assert all(later < earlier for earlier, later in pairwise(bounds))

    quarter = [flop_estimate(256, 256, n_blocks, 64 // n_blocks).total_flops for n_blocks in (1, 2, 4, 8)]
    assert quarter == [369_098_752, 124_780_544, 45_285_376, 18_096_128]
    assert all(later < earlier for earlier, later in pairwise(quarter))


def test_flop_estimate_on_random_tuples():
    rng = np.random.default_rng(SEED)
    for _ in range(20):
        m = int(rng.integers(10, 501))
        n_blocks = int(rng.integers(1, 17))
        s = int(rng.integers(1, 101))
        k = int(rng.integers(1, s + 1))
        estimate = flop_estimate(m, n_blocks * s, n_blocks, k)

        per_block = 6 * m * s**2 + 16 * s**3
        merge = 6 * m * k**2 + 176 * k**3
        assert estimate.per_block_flops == per_block
        assert estimate.merge_flops == merge
        assert estimate.total_flops == n_blocks * per_block + (n_blocks - 1) * merge
        assert estimate.within_bound
