import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import mp_sinkhorn
from weitop.numerics import DomainError, make_rng
from weitop.ot import (
    Marginals,
    absorbed_token_mass,
    build_extended_scores,
    default_marginals,
    sinkhorn_solve,
)


def test_extended_scores_layout():
    ext = build_extended_scores([[1.0, 2.0], [3.0, 4.0]], 0.5).matrix
    np.testing.assert_array_equal(ext, [[1, 2, 0.5], [3, 4, 0.5], [0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(build_extended_scores([[0.0]], 0.0).matrix, np.zeros((2, 2)))
    assert build_extended_scores(np.zeros((529, 64)), 1.0).matrix.shape == (530, 65)


def test_extended_scores_errors():
    with pytest.raises(DomainError):
        build_extended_scores(np.zeros((0, 3)), 1.0)
    with pytest.raises(DomainError):
        build_extended_scores([[np.nan]], 1.0)


def test_extended_scores_gradient_reaches_dustbin():
    z = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    build_extended_scores(torch.zeros(3, 2, dtype=torch.float64), z).matrix.sum().backward()
    # 3 + 2 border cells + corner
    assert float(z.grad) == 6.0


def test_default_marginals():
    m = default_marginals(1, 1)
    np.testing.assert_allclose(m.a, [0.5, 0.5])
    np.testing.assert_allclose(m.b, [0.5, 0.5])
    m = default_marginals(2, 1)
    np.testing.assert_allclose(m.a, [1 / 3] * 3)
    np.testing.assert_allclose(m.b, [1 / 3, 2 / 3])


@given(st.integers(1, 300), st.integers(1, 100))
def test_default_marginals_normalized(n, mm):
    m = default_marginals(n, mm)
    assert float(m.a.sum()) == pytest.approx(1.0, abs=1e-12)
    assert float(m.b.sum()) == pytest.approx(1.0, abs=1e-12)
    assert (m.a > 0).all() and (m.b > 0).all()


@pytest.mark.parametrize("eps", [0.01, 0.1, 1.0, 10.0])
def test_uniform_scores_give_uniform_plan(eps):
    ext = build_extended_scores([[0.7]], 0.7)
    plan = sinkhorn_solve(ext, default_marginals(1, 1), eps).plan
    np.testing.assert_allclose(plan, np.full((2, 2), 0.25), atol=1e-15)


ORACLE_CASES = [
    # (S, z, eps)
    (np.array([[10.0], [0.0]]), 0.0, 0.1),
    (np.array([[0.3, -0.2, 0.9], [1.1, 0.4, -0.5], [0.0, 0.2, 0.1], [-0.7, 0.8, 0.6]]), 0.25, 0.1),
    (np.array([[2.0, -1.0], [0.5, 0.5], [-1.5, 3.0]]), -0.4, 0.5),
]


@pytest.mark.parametrize("S,z,eps", ORACLE_CASES)
def test_matches_extended_precision_oracle(S, z, eps):
    # same number of scaling steps on both sides; [[10],[0]] converges only sublinearly
    n, m = S.shape
    marg = default_marginals(n, m)
    expected = mp_sinkhorn(S, z, marg.a.numpy(), marg.b.numpy(), eps, iters=500)
    got = sinkhorn_solve(build_extended_scores(S, z), marg, eps, max_iters=500, tol=None)
    assert got.iterations_used == 500
    np.testing.assert_allclose(got.plan.numpy(), expected, rtol=0, atol=1e-8)


@pytest.mark.parametrize("S,z,eps", ORACLE_CASES[1:])
def test_converged_plan_matches_oracle(S, z, eps):
    n, m = S.shape
    marg = default_marginals(n, m)
    expected = mp_sinkhorn(S, z, marg.a.numpy(), marg.b.numpy(), eps, iters=3000)
    got = sinkhorn_solve(build_extended_scores(S, z), marg, eps, max_iters=3000, tol=1e-14)
    assert got.converged
    np.testing.assert_allclose(got.plan.numpy(), expected, rtol=0, atol=1e-12)


def random_problem(rng, n=50, m=20):
    return build_extended_scores(rng.uniform(size=(n, m)), rng.uniform()), default_marginals(n, m)


def test_random_problems_reach_tolerance():
    rng = make_rng(11)
    for _ in range(20):
        ext, marg = random_problem(rng)
        p = sinkhorn_solve(ext, marg, 0.1, 100, 1e-6)
        assert p.converged and p.iterations_used <= 100
        P = p.plan
        assert (P >= 0).all()
        assert float((P.sum(1) - marg.a).abs().max()) <= 1e-6
        assert float((P.sum(0) - marg.b).abs().max()) <= 1e-6


def test_non_convergence_is_flagged_not_raised():
    rng = make_rng(2)
    ext = build_extended_scores(5 * rng.standard_normal((30, 10)), 0.0)
    p = sinkhorn_solve(ext, default_marginals(30, 10), 0.01, max_iters=3, tol=1e-12)
    assert not p.converged
    assert p.iterations_used == 3
    assert p.max_marginal_violation > 1e-12


def test_bad_inputs():
    ext = build_extended_scores([[1.0]], 0.0)
    with pytest.raises(DomainError):
        sinkhorn_solve(ext, default_marginals(1, 1), 0.0)
    with pytest.raises(DomainError):
        sinkhorn_solve(ext, default_marginals(1, 1), 0.1, tol=0.0)
    with pytest.raises(DomainError):
        sinkhorn_solve(ext, default_marginals(2, 1), 0.1)


def test_no_overflow_at_large_score_range():
    rng = make_rng(4)
    ext = build_extended_scores(10 * rng.uniform(-1, 1, size=(40, 8)), 0.0)
    p = sinkhorn_solve(ext, default_marginals(40, 8), 0.01, max_iters=500, tol=1e-6)
    assert torch.isfinite(p.plan).all()


def test_high_epsilon_limit_is_outer_product():
    rng = make_rng(5)
    ext, marg = random_problem(rng, 12, 5)
    p = sinkhorn_solve(ext, marg, 1e6, 100, 1e-12)
    expected = torch.outer(marg.a, marg.b) / marg.a.sum()
    assert float((p.plan - expected).abs().max()) < 1e-4


def test_row_permutation_equivariance():
    rng = make_rng(6)
    S = rng.uniform(size=(15, 4))
    perm = rng.permutation(15)
    marg = default_marginals(15, 4)
    p = sinkhorn_solve(build_extended_scores(S, 0.2), marg, 0.1, 300, 1e-12).plan
    q = sinkhorn_solve(build_extended_scores(S[perm], 0.2), marg, 0.1, 300, 1e-12).plan
    np.testing.assert_allclose(q[:-1], p[:-1][perm], atol=1e-12)
    np.testing.assert_allclose(q[-1], p[-1], atol=1e-12)


def test_l1_violation_trace_is_non_increasing():
    rng = make_rng(8)
    for _ in range(10):
        ext = build_extended_scores(rng.standard_normal((30, 12)), rng.standard_normal())
        p = sinkhorn_solve(ext, default_marginals(30, 12), 0.1, 60, tol=None, track=True)
        trace = np.array(p.violation_trace)
        assert len(trace) == 60
        assert np.all(np.diff(trace) <= 1e-15)


def test_fixed_iteration_mode_is_differentiable():
    S = torch.tensor([[0.2, 0.9], [0.4, -0.1]], dtype=torch.float64, requires_grad=True)
    p = sinkhorn_solve(build_extended_scores(S, 0.0), default_marginals(2, 2), 0.5, 10, tol=None)
    assert p.iterations_used == 10
    p.plan[0, 0].backward()
    assert torch.isfinite(S.grad).all() and S.grad.abs().sum() > 0


def test_batched_solve_matches_single():
    rng = make_rng(9)
    S = rng.uniform(size=(3, 6, 4))
    marg = default_marginals(6, 4)
    batched = sinkhorn_solve(build_extended_scores(S, 0.1), marg, 0.1, 50, tol=None).plan
    for i in range(3):
        single = sinkhorn_solve(build_extended_scores(S[i], 0.1), marg, 0.1, 50, tol=None).plan
        np.testing.assert_allclose(batched[i], single, atol=1e-14)


def test_absorbed_token_mass():
    rng = make_rng(10)
    ext, marg = random_problem(rng, 6, 3)
    p = sinkhorn_solve(ext, marg)
    np.testing.assert_allclose(absorbed_token_mass(p, np.ones(3)), p.plan[:-1, :-1].sum(1))
    np.testing.assert_array_equal(absorbed_token_mass(p, np.zeros(3)), np.zeros(6))
    plan = np.array([[0.2, 0.4, 0.0], [0.0, 0.0, 0.0]])
    assert float(absorbed_token_mass(plan, [1.0, 0.5])[0]) == pytest.approx(0.4)
    with pytest.raises(DomainError):
        absorbed_token_mass(p, np.ones(2))


def test_marginals_dataclass_logs():
    m = Marginals(torch.tensor([0.5, 0.5], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
    np.testing.assert_allclose(m.log_a, np.log([0.5, 0.5]))
