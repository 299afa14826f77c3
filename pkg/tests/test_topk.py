"""Forward behavior of the transport-based soft top-k solver."""

import numpy as np
import pytest

from rankwarp.tensors import ValidationError
from rankwarp.topk import (
    TopKProblem,
    build_cost,
    hard_topk_oracle,
    selection_from_tape,
    sinkhorn_gamma_batch,
    sinkhorn_solve,
    soft_topk,
)


def _marginal_dev(plan, n, k):
    t = plan.astype(np.float64)
    row = np.abs(t.sum(axis=1) - 1.0 / n).max()
    col = np.abs(t.sum(axis=0) - np.array([(n - k) / n, k / n])).max()
    return max(row, col)


class TestCost:
    def test_extremes(self):
        assert np.array_equal(build_cost([1.0]), [[4.0, 0.0]])
        assert np.array_equal(build_cost([-1.0]), [[0.0, 4.0]])

    def test_half_scores(self):
        c = build_cost([0.5, -0.5])
        assert np.allclose(c, [[2.25, 0.25], [0.25, 2.25]])

    def test_range(self):
        rng = np.random.default_rng(0)
        c = build_cost(rng.uniform(-1, 1, 64))
        assert c.min() >= 0.0 and c.max() <= 4.0


class TestHardOracle:
    def test_max_element(self):
        assert hard_topk_oracle(np.array([0.9, 0.1, -0.5]), 1).tolist() == [True, False, False]

    def test_full_selection(self):
        assert hard_topk_oracle(np.array([0.2, -0.3, 0.7]), 3).all()

    def test_tie_toward_lower_index(self):
        assert hard_topk_oracle(np.array([0.5, 0.5, 0.1]), 1).tolist() == [True, False, False]

    def test_k_out_of_range(self):
        with pytest.raises(ValidationError):
            hard_topk_oracle(np.array([0.1]), 2)


class TestProblem:
    def test_scores_clamped(self):
        p = TopKProblem(np.array([2.0, -3.0]), k=1)
        assert p.scores.tolist() == [1.0, -1.0]

    def test_invalid_parameters(self):
        with pytest.raises(ValidationError):
            TopKProblem(np.array([0.1]), k=0)
        with pytest.raises(ValidationError):
            TopKProblem(np.array([0.1]), k=1, lam=-1.0)
        with pytest.raises(ValidationError):
            TopKProblem(np.array([0.1]), k=1, tolerance=0.0)


class TestSolve:
    def test_uniform_scores_split_evenly(self):
        p = TopKProblem(np.zeros(4), k=2)
        plan, _ = sinkhorn_solve(p)
        assert np.allclose(plan.plan[:, 1], 0.125, atol=1e-7)
        assert np.allclose(soft_topk(p).gamma, 0.5, atol=1e-6)

    def test_sharp_lambda_selects_max(self):
        # slow dual crawl at lambda=100; the budget buys convergence to ~3e-5
        p = TopKProblem(np.array([0.9, 0.1, -0.5]), k=1, lam=100.0, max_iters=20000)
        gamma = soft_topk(p).gamma
        assert np.abs(gamma - np.array([1.0, 0.0, 0.0])).max() < 1e-3

    def test_marginals_at_convergence(self):
        rng = np.random.default_rng(21)
        converged = 0
        for _ in range(60):
            n = int(rng.integers(2, 33))
            k = int(rng.integers(1, n))
            lam = float(rng.choice([5.0, 20.0, 50.0]))
            p = TopKProblem(rng.uniform(-1, 1, n), k=k, lam=lam, max_iters=3000)
            plan, _ = sinkhorn_solve(p)
            if plan.marginal_error <= p.tolerance:
                converged += 1
                assert _marginal_dev(plan.plan, n, k) <= 1e-6
                gamma = soft_topk(p).gamma
                assert abs(gamma.sum() - k) < 1e-4
                # gamma is n * row mass, so a row-sum slack of tol admits
                # an overshoot of n * tol above 1
                assert gamma.min() > -1e-9
                assert gamma.max() < 1 + n * p.tolerance
        assert converged >= 40, f"only {converged} instances converged"

    def test_nonconvergence_is_reported_not_raised(self):
        p = TopKProblem(np.array([0.5, 0.49, -0.7]), k=1, lam=500.0, max_iters=3)
        plan, _ = sinkhorn_solve(p)
        assert plan.iterations_used == 3
        assert plan.marginal_error > 0

    def test_nonnegative_every_iteration(self):
        p = TopKProblem(np.array([0.8, -0.2, 0.3, -0.9]), k=2, lam=80.0, max_iters=50)
        _, tape = sinkhorn_solve(p)
        for state in tape.states:
            assert np.exp(state).min() >= 0.0
            assert np.isfinite(state[np.isfinite(state)]).all()

    def test_k_equals_n_fully_constrained(self):
        p = TopKProblem(np.array([0.7, -0.7]), k=2)
        plan, _ = sinkhorn_solve(p)
        assert np.array_equal(plan.plan, np.array([[0.0, 0.5], [0.0, 0.5]], dtype=np.float32))
        assert soft_topk(p).gamma.tolist() == [1.0, 1.0]

    def test_single_score(self):
        p = TopKProblem(np.array([-0.3]), k=1)
        assert soft_topk(p).gamma.tolist() == [1.0]

    def test_determinism(self):
        a = np.random.default_rng(9).uniform(-1, 1, 16)
        p1, t1 = sinkhorn_solve(TopKProblem(a, k=4, lam=30.0))
        p2, t2 = sinkhorn_solve(TopKProblem(a, k=4, lam=30.0))
        assert p1.plan.tobytes() == p2.plan.tobytes()
        assert np.array_equal(t1.states[-1], t2.states[-1])


class TestIndicatorLimit:
    def test_separated_scores_match_oracle(self):
        # sharpness x gap = 60 * 0.2 >> 1, so converged gamma is an indicator;
        # the stop tolerance must sit well under the asserted deviation, as
        # residual gamma error tracks n * tolerance rather than the true leak
        rng = np.random.default_rng(31)
        converged = 0
        worst = 0.0
        for _ in range(100):
            n = int(rng.integers(2, 33))
            k = int(rng.integers(1, n))
            boundary = rng.uniform(-0.7, 0.7)
            top = rng.uniform(boundary + 0.2, 1.0, k)
            bot = rng.uniform(-1.0, boundary, n - k)
            a = np.concatenate([top, bot])[rng.permutation(n)]
            p = TopKProblem(a, k=k, lam=60.0, max_iters=3000, tolerance=2e-8)
            plan, tape = sinkhorn_solve(p)
            if plan.marginal_error > p.tolerance:
                continue
            converged += 1
            sel = selection_from_tape(p, tape)
            worst = max(worst, np.abs(sel.gamma - sel.hard.astype(np.float64)).max())
        assert converged >= 25, f"only {converged} instances converged"
        assert worst < 1e-3, f"worst converged deviation {worst:.2e}"

    def test_hard_limit_argsort_consistency(self):
        # identification needs no convergence, only enough dual progress
        rng = np.random.default_rng(32)
        for trial in range(100):
            n = int(rng.integers(2, 33))
            k = int(rng.integers(1, n))
            boundary = rng.uniform(-0.8, 0.8)
            top = rng.uniform(boundary + 0.1, 1.0, k)
            bot = rng.uniform(-1.0, boundary, n - k)
            a = np.concatenate([top, bot])[rng.permutation(n)]
            lam = float(rng.choice([100.0, 200.0]))
            p = TopKProblem(a, k=k, lam=lam, max_iters=4000)
            sel = soft_topk(p)
            got = np.sort(np.argsort(-sel.gamma, kind="stable")[:k])
            want = np.sort(np.flatnonzero(sel.hard))
            assert np.array_equal(got, want), f"trial {trial} mis-identified"


class TestMonotonicity:
    def test_gamma_monotone_in_own_score(self):
        rng = np.random.default_rng(41)
        for trial in range(25):
            n = int(rng.integers(3, 17))
            k = int(rng.integers(1, n))
            a = rng.uniform(-0.9, 0.9, n)
            i = int(rng.integers(0, n))
            before = soft_topk(TopKProblem(a, k=k, lam=20.0, max_iters=3000)).gamma[i]
            bumped = a.copy()
            bumped[i] = min(bumped[i] + 0.08, 1.0)
            after = soft_topk(TopKProblem(bumped, k=k, lam=20.0, max_iters=3000)).gamma[i]
            assert after >= before - 1e-5, f"trial {trial}: {before:.6f} -> {after:.6f}"


class TestBatch:
    def test_bit_parity_with_single_solves(self):
        rng = np.random.default_rng(51)
        scores = rng.uniform(-1, 1, (20, 24))
        gamma, iters, errs = sinkhorn_gamma_batch(scores, k=5, lam=50.0, max_iters=400)
        for i in range(20):
            p = TopKProblem(scores[i], k=5, lam=50.0, max_iters=400)
            plan, tape = sinkhorn_solve(p)
            single = p.n * np.exp(tape.states[-1][:, 1])
            assert np.array_equal(gamma[i], single), f"row {i} diverged from single solve"
            assert iters[i] == plan.iterations_used
            assert errs[i] == plan.marginal_error

    def test_k_equals_n(self):
        gamma, iters, _ = sinkhorn_gamma_batch(np.zeros((3, 4)), k=4, lam=50.0)
        assert np.array_equal(gamma, np.ones((3, 4)))
        assert iters.tolist() == [0, 0, 0]

    def test_per_problem_k_bit_parity(self):
        # mixed counts in one sweep, k == n rows included
        rng = np.random.default_rng(52)
        scores = rng.uniform(-1, 1, (9, 12))
        ks = np.array([1, 3, 12, 5, 7, 2, 12, 9, 4])
        gamma, iters, errs = sinkhorn_gamma_batch(scores, ks, lam=35.0, max_iters=800)
        for i in range(9):
            p = TopKProblem(scores[i], k=int(ks[i]), lam=35.0, max_iters=800)
            plan, tape = sinkhorn_solve(p)
            single = selection_from_tape(p, tape).gamma
            assert np.array_equal(gamma[i], single), f"row {i} diverged"
            assert iters[i] == plan.iterations_used
            assert errs[i] == plan.marginal_error

    def test_per_problem_k_validation(self):
        with pytest.raises(ValidationError):
            sinkhorn_gamma_batch(np.zeros((3, 4)), np.array([1, 2]), lam=50.0)
        with pytest.raises(ValidationError):
            sinkhorn_gamma_batch(np.zeros((3, 4)), np.array([1, 0, 2]), lam=50.0)
        with pytest.raises(ValidationError):
            sinkhorn_gamma_batch(np.zeros((3, 4)), np.array([1, 5, 2]), lam=50.0)

    def test_bad_shapes(self):
        with pytest.raises(ValidationError):
            sinkhorn_gamma_batch(np.zeros(4), k=1, lam=50.0)
