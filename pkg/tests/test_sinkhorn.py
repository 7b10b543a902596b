import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from otmf.errors import ConfigError, DataError, NumericalError, ShapeMismatchError
from otmf.sinkhorn import (
    CostMatrix,
    Marginals,
    SinkhornConfig,
    exact_ot_oracle,
    pairwise_cost,
    sinkhorn_distance,
    sinkhorn_grad_features,
    sinkhorn_plan,
)


def random_cost(rng, n, m=None):
    m = n if m is None else m
    return CostMatrix(rng.uniform(0.0, 4.0, size=(n, m)))


# ---------------------------------------------------------------------------
# config and input validation


def test_config_validation():
    with pytest.raises(ConfigError):
        SinkhornConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        SinkhornConfig(tolerance=-1.0)
    with pytest.raises(ConfigError):
        SinkhornConfig(max_iters=0)
    assert SinkhornConfig(epsilon=0.25).regularization_strength == 4.0


def test_cost_matrix_validation():
    with pytest.raises(NumericalError):
        CostMatrix(np.array([[1.0, -0.1], [0.0, 1.0]]))
    with pytest.raises(NumericalError):
        CostMatrix(np.array([[np.nan]]))
    with pytest.raises(ShapeMismatchError):
        CostMatrix(np.ones(3))


def test_marginals_validation():
    with pytest.raises(DataError):
        Marginals(np.array([0.5, 0.5]), np.array([0.7, 0.2]))
    with pytest.raises(DataError):
        Marginals(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    u = Marginals.uniform(4, 2)
    assert np.allclose(u.r, 0.25) and np.allclose(u.c, 0.5)


def test_plan_marginal_shape_check(rng):
    C = random_cost(rng, 3)
    with pytest.raises(ShapeMismatchError):
        sinkhorn_plan(C, Marginals.uniform(4, 3), SinkhornConfig())


# ---------------------------------------------------------------------------
# pairwise cost


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10))
@settings(deadline=None, max_examples=30)
def test_pairwise_cost_matches_cdist(n, m, d, seed):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    C = pairwise_cost(X, Y)
    np.testing.assert_allclose(C.values, cdist(X, Y, "sqeuclidean"), atol=1e-12)
    assert np.all(C.values >= 0)


def test_pairwise_cost_rejects_bad_inputs(rng):
    with pytest.raises(ShapeMismatchError):
        pairwise_cost(rng.normal(size=(3, 2)), rng.normal(size=(3, 3)))
    with pytest.raises(DataError):
        pairwise_cost(np.empty((0, 2)), rng.normal(size=(3, 2)))
    with pytest.raises(NumericalError):
        pairwise_cost(np.array([[np.inf, 0.0]]), np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# solver correctness


def test_exact_oracle_matches_linear_sum_assignment(rng):
    for n in range(2, 7):
        for _ in range(10):
            C = random_cost(rng, n)
            ri, ci = linear_sum_assignment(C.values)
            lp = C.values[ri, ci].sum() / n
            assert exact_ot_oracle(C) == pytest.approx(lp, abs=1e-12)


def test_exact_oracle_limits(rng):
    with pytest.raises(ShapeMismatchError):
        exact_ot_oracle(random_cost(rng, 2, 3))
    with pytest.raises(DataError):
        exact_ot_oracle(random_cost(rng, 9))


@given(st.integers(2, 6), st.integers(0, 20))
@settings(deadline=None, max_examples=40)
def test_plan_satisfies_marginals(n, seed):
    rng = np.random.default_rng(seed)
    C = random_cost(rng, n)
    cfg = SinkhornConfig(epsilon=0.1, max_iters=50000, tolerance=1e-5)
    plan = sinkhorn_plan(C, Marginals.uniform(n, n), cfg)
    assert plan.converged
    assert plan.marginal_error <= cfg.tolerance
    assert np.all(plan.plan >= 0)
    assert plan.plan.sum() == pytest.approx(1.0, abs=1e-9)


def test_transport_cost_bounded_below_by_lp(rng):
    for _ in range(20):
        n = int(rng.integers(2, 7))
        C = random_cost(rng, n)
        plan = sinkhorn_plan(C, Marginals.uniform(n, n), SinkhornConfig(epsilon=0.05))
        assert plan.transport_cost >= exact_ot_oracle(C) - 1e-9


def test_small_epsilon_approaches_exact(rng):
    cfg = SinkhornConfig(epsilon=1e-3, max_iters=20000, tolerance=1e-8)
    for _ in range(10):
        n = int(rng.integers(2, 7))
        C = random_cost(rng, n)
        plan = sinkhorn_plan(C, Marginals.uniform(n, n), cfg)
        assert abs(plan.transport_cost - exact_ot_oracle(C)) <= 1e-2


def test_direct_and_log_domain_agree(rng):
    for _ in range(10):
        n = int(rng.integers(2, 6))
        C = random_cost(rng, n)
        marg = Marginals.uniform(n, n)
        p_log = sinkhorn_plan(C, marg, SinkhornConfig(epsilon=0.5, log_domain=True))
        p_dir = sinkhorn_plan(C, marg, SinkhornConfig(epsilon=0.5, log_domain=False))
        # the two paths stop at slightly different fixed-point residuals
        np.testing.assert_allclose(p_log.plan, p_dir.plan, atol=1e-5)
        assert p_log.transport_cost == pytest.approx(p_dir.transport_cost, abs=1e-5)


def test_nonuniform_marginals(rng):
    C = random_cost(rng, 3)
    marg = Marginals(np.array([0.6, 0.3, 0.1]), np.array([0.2, 0.3, 0.5]))
    plan = sinkhorn_plan(C, marg, SinkhornConfig(epsilon=0.2, max_iters=5000))
    np.testing.assert_allclose(plan.plan.sum(axis=1), marg.r, atol=1e-6)
    np.testing.assert_allclose(plan.plan.sum(axis=0), marg.c, atol=1e-6)


def test_direct_mode_underflow_raises():
    # one row of exp(-C/eps) underflows entirely
    C = CostMatrix(np.array([[5000.0, 5000.0], [1.0, 0.0]]))
    with pytest.raises(NumericalError, match="log_domain"):
        sinkhorn_plan(C, Marginals.uniform(2, 2), SinkhornConfig(epsilon=1e-3, log_domain=False))


def test_scaling_form_consistency(rng):
    """The returned potentials reproduce the plan: P = diag(u) K diag(v)."""
    n = 4
    C = random_cost(rng, n)
    cfg = SinkhornConfig(epsilon=0.3)
    plan = sinkhorn_plan(C, Marginals.uniform(n, n), cfg)
    K = np.exp(-C.values / cfg.epsilon)
    rebuilt = plan.u[:, None] * K * plan.v[None, :]
    np.testing.assert_allclose(rebuilt, plan.plan, atol=1e-9)


def test_reg_objective_below_transport_cost(rng):
    # entropy H(P) = -sum P(log P - 1) is positive for couplings, so the
    # regularized value sits strictly below <P, C>
    C = random_cost(rng, 4)
    plan = sinkhorn_plan(C, Marginals.uniform(4, 4), SinkhornConfig(epsilon=0.2))
    assert plan.reg_objective < plan.transport_cost


# ---------------------------------------------------------------------------
# distances and gradients


def test_sinkhorn_distance_self_is_small(rng):
    X = rng.normal(size=(6, 3))
    dist, plan = sinkhorn_distance(X, X.copy(), SinkhornConfig(epsilon=1e-3, max_iters=5000))
    assert dist <= 1e-3
    assert plan.converged


def test_grad_features_matches_fd(rng):
    """Envelope gradient of the entropic objective vs central differences."""
    cfg = SinkhornConfig(epsilon=0.1, max_iters=20000, tolerance=1e-10)
    X = rng.normal(size=(5, 3))
    Y = rng.normal(size=(5, 3))

    def objective(Xf):
        _, plan = sinkhorn_distance(Xf, Y, cfg)
        return plan.reg_objective

    _, plan = sinkhorn_distance(X, Y, cfg)
    g = sinkhorn_grad_features(X, Y, plan)
    h = 1e-6
    fd = np.zeros_like(X)
    for i in range(X.shape[0]):
        for j in range(X.shape[1]):
            xp, xm = X.copy(), X.copy()
            xp[i, j] += h
            xm[i, j] -= h
            fd[i, j] = (objective(xp) - objective(xm)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_grad_features_shape_checks(rng):
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(5, 2))
    _, plan = sinkhorn_distance(X, Y, SinkhornConfig())
    with pytest.raises(ShapeMismatchError):
        sinkhorn_grad_features(X[:3], Y, plan)
