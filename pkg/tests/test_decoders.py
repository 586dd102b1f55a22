import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksecret.decoders import (
    SolverConfig,
    block_bp,
    block_iht,
    block_omp,
    bp,
    exhaustive_block_l0,
    exhaustive_l0,
    iht,
    omp,
    recovery_success,
    solve,
    spectral_norm,
)
from blocksecret.errors import DimensionError, ParameterError
from blocksecret.model import (
    BlockStructure,
    derive_rng,
    sample_block_structure,
    sample_channel,
)


def block_signal(bs, active, rng):
    x = np.zeros(bs.N)
    mask = np.isin(bs.labels, list(active))
    x[mask] = rng.standard_normal(mask.sum())
    return x


def instance(seed, N, M, d, k):
    rng = derive_rng(seed, "instance")
    bs = sample_block_structure(N, d, rng)
    A = sample_channel(M, N, rng)
    active = rng.choice(bs.R, size=k, replace=False)
    x = block_signal(bs, active, rng)
    return bs, A, x, A @ x


def brute_force_block_support(y, A, bs, k):
    """Independent enumeration of all k-block supports, by explicit least squares."""
    best = None
    for combo in itertools.combinations(range(bs.R), k):
        cols = np.flatnonzero(np.isin(bs.labels, combo))
        coef = np.linalg.lstsq(A[:, cols], y, rcond=None)[0]
        res = np.linalg.norm(y - A[:, cols] @ coef)
        if best is None or res < best[0]:
            best = (res, combo, cols, coef)
    x = np.zeros(bs.N)
    x[best[2]] = best[3]
    return x, best[0]


class TestRecoverySuccess:
    def test_identical(self):
        x = np.array([1.0, -2.0, 3.0])
        assert recovery_success(x, x, tol=0.0)

    def test_zero_guard(self):
        assert recovery_success(np.zeros(3), np.zeros(3))
        assert recovery_success(np.zeros(3), np.full(3, 1e-5))

    def test_relative_error(self):
        e1 = np.array([1.0, 0, 0])
        assert not recovery_success(e1, 1.1 * e1, tol=1e-4)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            recovery_success(np.zeros(3), np.zeros(4))


class TestSolverConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(max_iterations=0), dict(residual_tolerance=0.0), dict(step_size=-1.0),
        dict(step_size="fast"), dict(admm_penalty=0.0), dict(sparsity_budget=0),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ParameterError):
            SolverConfig(**kwargs)


def test_spectral_norm_matches_svd(rng):
    A = sample_channel(30, 80, rng)
    assert spectral_norm(A) == pytest.approx(np.linalg.norm(A, 2), rel=1e-4)


class TestZeroObservation:
    @pytest.mark.parametrize("name", ["block_omp", "block_iht", "block_bp", "omp", "iht", "bp"])
    def test_zero(self, name, rng):
        bs = sample_block_structure(12, 3, rng)
        A = sample_channel(6, 12, rng)
        res = solve(name, np.zeros(6), A, bs, SolverConfig(sparsity_budget=2))
        assert not res.estimate.any()
        assert res.iterations_used == 0 and res.converged


class TestBlockOmp:
    def test_single_block_orthonormal(self, rng):
        bs = sample_block_structure(40, 5, rng)
        A = sample_channel(20, 40, rng)
        cols = bs.blocks()[3]
        A[:, cols] = np.linalg.qr(rng.standard_normal((20, 5)))[0]
        x = block_signal(bs, [3], rng)
        res = block_omp(A @ x, A, bs)
        assert np.linalg.norm(res.estimate - x) < 1e-6 * np.linalg.norm(x)
        assert res.support == (3,)

    def test_matches_brute_force(self):
        # greedy selection can pick a wrong block first; whenever it stops with a
        # certified (at most two-block, exactly fitting) answer it must be the oracle's
        matches = 0
        for seed in range(50):
            bs, A, x, y = instance(seed, 24, 16, 4, 2)
            res = block_omp(y, A, bs)
            oracle, oracle_res = brute_force_block_support(y, A, bs, 2)
            assert oracle_res < 1e-9 * np.linalg.norm(y)
            if res.converged and len(res.support) <= 2:
                np.testing.assert_allclose(res.estimate, oracle, atol=1e-8)
                matches += 1
        assert matches >= 40  # long-run rate is about 94%

    def test_residual_non_increasing(self):
        for seed in range(10):
            bs, A, x, y = instance(seed, 60, 30, 3, 4)
            hist = block_omp(y, A, bs).residual_history
            assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))

    def test_support_never_exceeds_m(self):
        bs, A, x, y = instance(4, 60, 20, 6, 5)
        res = block_omp(y, A, bs)
        assert len(res.support) * bs.d <= 20
        assert np.all(np.isin(np.flatnonzero(res.estimate), np.flatnonzero(np.isin(bs.labels, res.support))))

    def test_tie_breaks_to_lowest_index(self):
        bs = BlockStructure([0, 0, 1, 1])
        A = np.eye(2, 4) + np.eye(2, 4, k=2)
        res = block_omp(np.array([1.0, 1.0]), A, bs, SolverConfig(sparsity_budget=1))
        assert res.support == (0,)

    def test_rank_deficient_flag(self):
        bs = BlockStructure([0, 0, 1, 1])
        A = np.array([[1.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0]])
        res = block_omp(np.array([2.0, 0.0, 0.0]), A, bs)
        assert res.rank_deficient
        np.testing.assert_allclose(A @ res.estimate, [2.0, 0.0, 0.0], atol=1e-12)

    def test_dimension_mismatch(self, rng):
        bs = sample_block_structure(12, 3, rng)
        with pytest.raises(DimensionError):
            block_omp(np.ones(5), sample_channel(6, 12, rng), bs)
        with pytest.raises(DimensionError):
            block_omp(np.ones(6), sample_channel(6, 16, rng), bs)


class TestBlockIht:
    def test_requires_budget(self, rng):
        bs = sample_block_structure(12, 3, rng)
        with pytest.raises(ParameterError):
            block_iht(np.ones(6), sample_channel(6, 12, rng), bs, SolverConfig())

    def test_warns_on_large_budget(self):
        bs, A, x, y = instance(0, 24, 8, 4, 1)
        with pytest.warns(UserWarning):
            block_iht(y, A, bs, SolverConfig(sparsity_budget=3))

    def test_seeded_trials(self):
        successes = 0
        for trial in range(100):
            bs, A, x, y = instance(1000 + trial, 200, 100, 10, 2)
            res = block_iht(y, A, bs, SolverConfig(sparsity_budget=2))
            assert len(res.support) <= 2
            if res.converged:
                assert res.residual_norm <= 1e-8 * np.linalg.norm(y)
            successes += recovery_success(x, res.estimate)
        assert successes >= 95

    def test_brute_force_spot_check(self):
        bs, A, x, y = instance(3, 30, 20, 3, 2)
        res = block_iht(y, A, bs, SolverConfig(sparsity_budget=2))
        oracle = exhaustive_block_l0(y, A, bs)
        np.testing.assert_allclose(res.estimate, oracle.estimate, atol=1e-6)

    def test_full_budget_is_gradient_descent(self):
        bs, A, x, y = instance(5, 40, 20, 4, 3)
        res = block_iht(y, A, bs, SolverConfig(sparsity_budget=bs.R, max_iterations=200))
        hist = res.residual_history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(hist, hist[1:]))

    def test_divergence_flag(self):
        bs, A, x, y = instance(6, 40, 20, 4, 2)
        res = block_iht(y, A, bs, SolverConfig(sparsity_budget=2, step_size=50.0))
        assert not res.converged
        assert res.iterations_used < 1000


class TestBlockBp:
    def test_matches_exhaustive(self):
        for seed in range(10):
            bs, A, x, y = instance(seed, 24, 12, 4, 1)
            res = block_bp(y, A, bs)
            oracle = exhaustive_block_l0(y, A, bs)
            assert res.converged
            assert np.linalg.norm(y - A @ res.estimate) <= 1e-6 * np.linalg.norm(y)
            np.testing.assert_allclose(res.estimate, oracle.estimate, atol=1e-6)

    def test_reported_residual(self):
        bs, A, x, y = instance(2, 40, 20, 4, 2)
        res = block_bp(y, A, bs)
        assert res.residual_norm == pytest.approx(np.linalg.norm(y - A @ res.estimate), abs=1e-15)

    def test_iteration_cap(self):
        bs, A, x, y = instance(2, 40, 20, 4, 2)
        res = block_bp(y, A, bs, SolverConfig(max_iterations=3))
        assert not res.converged and res.iterations_used == 3


class TestPlainSolvers:
    def test_omp_one_sparse(self):
        for seed in range(10):
            rng = derive_rng(seed, "omp1")
            A = sample_channel(4, 30, rng)
            x = np.zeros(30)
            x[rng.integers(30)] = rng.standard_normal()
            res = omp(A @ x, A)
            assert np.linalg.norm(res.estimate - x) < 1e-10 * np.linalg.norm(x)

    def test_bp_matches_exhaustive(self):
        checked = matches = 0
        for seed in range(50):
            rng = derive_rng(seed, "bp2")
            A = sample_channel(8, 12, rng)
            x = np.zeros(12)
            x[rng.choice(12, 2, replace=False)] = rng.standard_normal(2)
            y = A @ x
            fits = [s for s in itertools.combinations(range(12), 2)
                    if np.linalg.norm(y - A[:, s] @ np.linalg.lstsq(A[:, s], y, rcond=None)[0]) < 1e-9]
            if len(fits) != 1:
                continue
            checked += 1
            oracle = exhaustive_l0(y, A)
            res = bp(y, A)
            if res.converged and 2 * len(res.support) <= 8:
                np.testing.assert_allclose(res.estimate, oracle.estimate, atol=1e-6)
            matches += recovery_success(oracle.estimate, res.estimate)
        assert checked >= 45
        assert matches >= 0.9 * checked

    @pytest.mark.parametrize("block, plain", [(block_omp, omp), (block_bp, bp)])
    def test_singleton_degeneration(self, block, plain):
        for seed in range(20):
            rng = derive_rng(seed, "degenerate")
            bs = BlockStructure(np.arange(20))
            A = sample_channel(10, 20, rng)
            x = np.zeros(20)
            x[rng.choice(20, 3, replace=False)] = rng.standard_normal(3)
            y = A @ x
            np.testing.assert_allclose(block(y, A, bs).estimate, plain(y, A).estimate, atol=1e-6)

    def test_singleton_degeneration_iht(self):
        for seed in range(20):
            rng = derive_rng(seed, "degenerate-iht")
            bs = BlockStructure(rng.permutation(20))
            A = sample_channel(10, 20, rng)
            y = A @ rng.standard_normal(20)
            cfg = SolverConfig(sparsity_budget=3, max_iterations=100)
            np.testing.assert_allclose(block_iht(y, A, bs, cfg).estimate, iht(y, A, cfg).estimate, atol=1e-6)


class TestSolve:
    def test_unknown(self, rng):
        with pytest.raises(ParameterError):
            solve("lasso", np.ones(2), np.ones((2, 3)))

    def test_block_needs_structure(self):
        with pytest.raises(ParameterError):
            solve("block_bp", np.ones(2), np.ones((2, 3)))


@given(st.integers(0, 2 ** 32), st.sampled_from([(24, 12, 4), (30, 18, 3), (30, 20, 5), (20, 10, 2)]),
       st.integers(1, 2))
@settings(max_examples=25, deadline=None)
def test_successful_block_solvers_match_oracle(seed, shape, k):
    N, M, d = shape
    bs, A, x, y = instance(seed, N, M, d, k)
    oracle = exhaustive_block_l0(y, A, bs, max_blocks=2)
    assert oracle.converged
    for name in ("block_omp", "block_iht", "block_bp"):
        res = solve(name, y, A, bs, SolverConfig(sparsity_budget=k))
        if res.converged:
            assert np.linalg.norm(y - A @ res.estimate) <= 1e-6 * np.linalg.norm(y)
        if res.converged and 2 * len(res.support) * d <= M:
            np.testing.assert_allclose(res.estimate, oracle.estimate, atol=1e-6)


@pytest.mark.slow
def test_block_bp_phase_transition_direction():
    N, M, d = 120, 48, 6
    rates = []
    for p in (0.1, 0.2, 0.3, 0.4, 0.5):
        wins = 0
        for trial in range(100):
            rng = derive_rng(17, "phase", int(p * 10), trial)
            bs = sample_block_structure(N, d, rng)
            A = sample_channel(M, N, rng)
            active = np.flatnonzero(rng.random(bs.R) < p)
            x = block_signal(bs, active, rng)
            wins += recovery_success(x, block_bp(A @ x, A, bs).estimate)
        rates.append(wins / 100)
    assert all(b <= a + 0.05 for a, b in zip(rates, rates[1:])), rates
