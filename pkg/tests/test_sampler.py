import math

import numpy as np
import pytest
from scipy import optimize, special, stats

from dfa_recommender.evaluation.predict import predictive_distribution
from dfa_recommender.exceptions import DomainError
from dfa_recommender.model.core import (FeatureAllocation, Hyperparams, LatentScores, ModelParams, RatingMatrix,
                                        log_category_prob, log_lik_row, probit_means)
from dfa_recommender.model.ibp import sample_prior
from dfa_recommender.model.sampler import (ChainConfig, ChainState, b_inclusion_prob, compact, init_state,
                                           new_feature_rate, normal_posterior, pB_posterior,
                                           rj_acceptance_prob, run_chain, sample_truncated_normal, sample_Z,
                                           sweep, tau_posterior, update_B_entry, update_pB, update_rho,
                                           update_row_A, update_tau, update_theta)
from dfa_recommender.resources.formats import format_draw

A0 = np.array([[1, 1], [1, 0], [0, 1], [1, 1]], dtype=np.int8)
B0 = np.array([[1, 0], [1, 1], [0, 1]], dtype=np.int8)
THETA0 = np.array([0.8, -0.6])


@pytest.fixture
def ratings():
    entries = [(0, 0, 4), (0, 1, 2), (0, 2, 5), (1, 0, 3), (1, 1, 1),
               (2, 1, 4), (2, 2, 3), (3, 0, 2), (3, 2, 4)]
    return RatingMatrix.from_entries(4, 3, entries)


def make_state(ratings, hyper=None, seed=0, tau=0.5, rho=None):
    hyper = hyper or Hyperparams()
    state = ChainState(
        A=A0.copy(), B=B0.copy(), theta=THETA0.copy(),
        rho=np.zeros(ratings.n) if rho is None else np.array(rho, dtype=float),
        tau=tau, z=np.empty(0), pB=hyper.pB,
        rng=np.random.default_rng(seed), hyper=hyper,
    )
    return sample_Z(state, ratings)


def reset(state, z):
    state.A, state.B, state.theta = A0.copy(), B0.copy(), THETA0.copy()
    state.z = z.copy()


def test_truncated_normal_stays_in_bracket():
    rng = np.random.default_rng(1)
    mean = rng.normal(2.5, 3.0, 5000)
    x = rng.integers(1, 6, 5000)
    lo = np.array([-np.inf, 1, 2, 3, 4])[x - 1]
    hi = np.array([1, 2, 3, 4, np.inf])[x - 1]

    z = sample_truncated_normal(mean, 0.3, lo, hi, rng)

    # Assertions
    assert np.all(np.isfinite(z))
    assert np.all((z > lo) & (z <= hi))


def test_truncated_normal_far_tail():
    rng = np.random.default_rng(2)
    upper = sample_truncated_normal(np.zeros(2000), 1.0, 10.0, np.inf, rng)
    lower = sample_truncated_normal(np.zeros(2000), 1.0, -np.inf, -12.0, rng)

    # Assertions
    assert np.all(np.isfinite(upper)) and np.all(upper > 10.0)
    assert np.all(np.isfinite(lower)) and np.all(lower <= -12.0)
    # E[X | X > 10] = phi(10) / (1 - Phi(10))
    assert upper.mean() == pytest.approx(stats.norm.pdf(10) / stats.norm.sf(10), abs=0.02)


def test_truncated_normal_matches_reference_distribution():
    rng = np.random.default_rng(3)
    mean, sd, lo, hi = 2.7, 0.5, 2.0, 3.0
    z = sample_truncated_normal(np.full(4000, mean), sd, lo, hi, rng)
    reference = stats.truncnorm((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd)
    assert stats.kstest(z, reference.cdf).pvalue > 1e-3


def test_sample_Z_is_consistent_with_ratings(ratings):
    state = make_state(ratings)
    assert LatentScores(state.z).consistent_with(ratings)


def test_tau_posterior_matches_grid_density(ratings):
    state = make_state(ratings, seed=4)
    shape, scale = tau_posterior(state, ratings)
    a, b = state.hyper.tau_prior
    resid = state.z - state.means(ratings)

    # Unnormalized log posterior of tau^2 on a grid
    s = np.linspace(0.02, 3.0, 400)
    log_post = -(a + 1) * np.log(s) - b / s
    log_post += -0.5 * resid.size * np.log(s) - 0.5 * (resid @ resid) / s
    diff = log_post - stats.invgamma.logpdf(s, shape, scale=scale)

    # Assertions
    assert shape == pytest.approx(a + ratings.n_obs / 2)
    assert np.ptp(diff) < 1e-8


def test_update_tau_draws_from_inverse_gamma(ratings):
    state = make_state(ratings, seed=5)
    shape, scale = tau_posterior(state, ratings)
    draws = []
    for _ in range(4000):
        update_tau(state, ratings)
        draws.append(state.tau ** 2)
    assert np.mean(draws) == pytest.approx(scale / (shape - 1), rel=0.05)


def test_normal_posterior_closed_form():
    mean, prec = normal_posterior(3.0, 2, 1.0, 0.0, 1.0)
    assert prec == pytest.approx(3.0)
    assert mean == pytest.approx(1.0)

    mean, prec = normal_posterior(np.array([4.0, 0.0]), np.array([2, 0]), 1.0, 0.0, math.inf)
    assert prec.tolist() == [2.0, 0.0]
    assert mean[0] == pytest.approx(2.0)


def test_normal_posterior_matches_grid_density():
    # Test data
    rng = np.random.default_rng(6)
    resid = rng.normal(1.2, 0.4, 7)
    tau, mu0, sigma0 = 0.4, 0.5, 2.0
    mean, prec = normal_posterior(resid.sum(), resid.size, tau, mu0, sigma0)

    # Assertions
    grid = np.linspace(-1.0, 3.0, 300)
    log_post = stats.norm.logpdf(grid, mu0, sigma0)
    log_post += stats.norm.logpdf(resid[:, None], grid, tau).sum(axis=0)
    diff = log_post - stats.norm.logpdf(grid, mean, 1 / np.sqrt(prec))
    assert np.ptp(diff) < 1e-8


def test_update_theta_samples_the_full_conditional(ratings):
    state = make_state(ratings, seed=7)
    z = state.z.copy()
    shared = state.A[ratings.users, 0] * state.B[ratings.items, 0] > 0
    other = state.A[ratings.users, 1] * state.B[ratings.items, 1] * THETA0[1]
    resid = z - state.hyper.b0 - state.rho[ratings.items] - other
    mean, prec = normal_posterior(resid[shared].sum(), shared.sum(), state.tau, 0.0, state.hyper.sigma0_theta)

    draws = []
    for _ in range(3000):
        reset(state, z)
        update_theta(state, ratings)
        draws.append(state.theta[0])

    # Assertions
    assert np.mean(draws) == pytest.approx(mean, abs=0.02)
    assert np.std(draws) == pytest.approx(1 / math.sqrt(prec), rel=0.06)


def test_update_rho_under_flat_prior(ratings):
    state = make_state(ratings, seed=8)
    z = state.z.copy()
    shared = (state.A[ratings.users] * state.B[ratings.items]) @ THETA0
    resid = z - state.hyper.b0 - shared
    counts = np.bincount(ratings.items, minlength=ratings.n)
    expected = np.bincount(ratings.items, weights=resid, minlength=ratings.n) / counts

    draws = []
    for _ in range(3000):
        reset(state, z)
        update_rho(state, ratings)
        draws.append(state.rho.copy())
    draws = np.array(draws)

    # Assertions
    assert np.allclose(draws.mean(axis=0), expected, atol=0.03)
    assert np.allclose(draws.std(axis=0), state.tau / np.sqrt(counts), rtol=0.06)


def test_update_rho_holds_unobserved_items_under_flat_prior():
    ratings = RatingMatrix.from_entries(2, 2, [(0, 0, 3), (1, 0, 4)])
    state = ChainState(A=np.zeros((2, 0), np.int8), B=np.zeros((2, 0), np.int8), theta=np.zeros(0),
                       rho=np.array([0.3, -0.7]), tau=0.5, z=np.empty(0), pB=0.1,
                       rng=np.random.default_rng(9), hyper=Hyperparams())
    sample_Z(state, ratings)
    update_rho(state, ratings)

    # Assertions
    assert state.rho[1] == -0.7
    assert state.rho[0] != 0.3
    assert state.diagnostics["rho_unobserved"] == 1


def test_pB_posterior_matches_grid_density(ratings):
    state = make_state(ratings)
    a_post, b_post = pB_posterior(state)
    ones = int(state.B.sum())
    a, b = state.hyper.pB_prior

    p = np.linspace(0.01, 0.99, 200)
    log_post = stats.beta.logpdf(p, a, b) + ones * np.log(p) + (state.B.size - ones) * np.log1p(-p)
    diff = log_post - stats.beta.logpdf(p, a_post, b_post)

    # Assertions
    assert (a_post, b_post) == (5.0, 11.0)
    assert np.ptp(diff) < 1e-8


def test_update_pB_fixed_without_hyperprior(ratings):
    state = make_state(ratings, hyper=Hyperparams(pB=0.3, pB_prior=None))
    update_pB(state)
    assert state.pB == 0.3

    state = make_state(ratings, hyper=Hyperparams(pB=0.3))
    update_pB(state)
    assert 0 < state.pB < 1
    assert state.pB != 0.3


def test_b_inclusion_prob_matches_enumeration(ratings):
    state = make_state(ratings, seed=10)
    i, k = 1, 1
    users, r = ratings.col(i)

    def column_loglik(bit):
        B = state.B.copy()
        B[i, k] = bit
        means = probit_means(users, np.full(users.size, i), state.A, B, state.theta, state.rho, state.hyper.b0)
        return log_category_prob(means, state.tau, r).sum()

    expected = special.expit(math.log(state.pB) + column_loglik(1) - math.log1p(-state.pB) - column_loglik(0))
    before = state.B.copy()

    # Assertions
    assert b_inclusion_prob(state, i, k, ratings) == pytest.approx(expected)
    assert np.array_equal(state.B, before)


def test_update_B_entry_rejects_out_of_range(ratings):
    state = make_state(ratings)
    with pytest.raises(IndexError):
        update_B_entry(state, 3, 0, ratings)
    with pytest.raises(IndexError):
        update_B_entry(state, 0, 2, ratings)


def test_update_row_A_gibbs_step_for_shared_feature(ratings):
    state = make_state(ratings, seed=11)
    z = state.z.copy()
    u = 1
    items, r = ratings.row(u)

    def row_loglik(a_u0):
        A = A0.copy()
        A[u, 0] = a_u0
        means = probit_means(np.full(items.size, u), items, A, B0, THETA0, state.rho, state.hyper.b0)
        return log_category_prob(means, state.tau, r).sum()

    p1 = (A0[:, 0].sum() - A0[u, 0]) / ratings.m
    expected = special.expit(math.log(p1) + row_loglik(1) - math.log1p(-p1) - row_loglik(0))

    hits = []
    for _ in range(4000):
        reset(state, z)
        update_row_A(state, u, ratings)
        hits.append(state.A[u, 0])

    # Assertions
    assert np.mean(hits) == pytest.approx(expected, abs=0.035)


def singular_state(theta, tau, lam=1e-9, seed=0):
    """User 0 alone holds feature 0, which item 0 carries."""
    return ChainState(A=np.array([[1], [0]], dtype=np.int8), B=np.array([[1]], dtype=np.int8),
                      theta=np.array([theta]), rho=np.zeros(1), tau=tau, z=np.empty(0), pB=0.1,
                      rng=np.random.default_rng(seed), hyper=Hyperparams(lam=lam))


def test_rj_acceptance_prob():
    assert rj_acceptance_prob(math.log(0.5), 0.0) == pytest.approx(0.5)
    assert rj_acceptance_prob(0.0, math.log(0.5)) == 1.0
    assert rj_acceptance_prob(-800.0, 0.0) == 0.0


def test_update_row_A_swap_accepted_at_likelihood_ratio():
    # Test data: theta chosen so that dropping the singular feature halves the row likelihood
    row = RatingMatrix.from_entries(2, 1, [(0, 0, 4), (1, 0, 3)])
    tau, base = 0.5, Hyperparams().b0

    def row_loglik(mean):
        return float(log_category_prob(np.array([mean]), tau, np.array([4]))[0])

    theta = optimize.brentq(lambda t: row_loglik(base + t) - row_loglik(base) - math.log(2.0), 0.0, 1.0)
    state = singular_state(theta, tau)
    alloc = FeatureAllocation(state.A, state.B)
    with_feature = log_lik_row(0, row, alloc, ModelParams(state.theta, state.rho, tau))
    without = log_lik_row(0, row, FeatureAllocation.empty(2, 1), ModelParams(np.zeros(0), state.rho, tau))
    assert rj_acceptance_prob(without, with_feature) == pytest.approx(0.5)

    accepted = []
    for seed in range(4000):
        state = singular_state(theta, tau, seed=seed)
        update_row_A(state, 0, row)
        accepted.append(state.K == 0)

    # Assertions
    assert np.mean(accepted) == pytest.approx(0.5, abs=0.035)


def test_update_row_A_accepted_swap_resizes_consistently():
    # Test data: user 2 rated nothing, so every swap is accepted; the rate makes births near certain
    row = RatingMatrix.from_entries(3, 2, [(0, 0, 4), (1, 1, 2)])
    A = np.array([[1, 0], [1, 0], [0, 1]], dtype=np.int8)
    B = np.array([[1, 1], [0, 1]], dtype=np.int8)
    state = ChainState(A=A.copy(), B=B.copy(), theta=np.array([0.4, -1.3]), rho=np.zeros(2), tau=0.5,
                       z=np.empty(0), pB=0.5, rng=np.random.default_rng(21), hyper=Hyperparams(lam=50.0))

    update_row_A(state, 2, row)
    born = state.K - 1

    # Assertions
    assert state.diagnostics["rj_accepted"] == 1
    assert born >= 1
    assert state.A.shape == (3, 1 + born)
    assert state.B.shape == (2, 1 + born)
    assert state.theta.shape == (1 + born,)
    assert state.A[:2, 0].tolist() == [1, 1]
    assert state.B[:, 0].tolist() == B[:, 0].tolist()
    assert state.theta[0] == 0.4
    assert state.A[:, 1:].tolist() == [[0] * born, [0] * born, [1] * born]


def test_update_row_A_rejected_swap_leaves_state_unchanged():
    # Test data: the singular feature moves the mean deep into the observed bracket
    row = RatingMatrix.from_entries(2, 1, [(0, 0, 5), (1, 0, 3)])
    state = singular_state(3.0, 0.1, seed=22)

    update_row_A(state, 0, row)

    # Assertions
    assert state.A.tolist() == [[1], [0]]
    assert state.B.tolist() == [[1]]
    assert state.theta.tolist() == [3.0]
    assert state.diagnostics["rj_proposed"] == 1
    assert "rj_accepted" not in state.diagnostics


def test_compact_leaves_row_likelihood_unchanged(ratings):
    state = make_state(ratings, seed=23)
    state.A = np.hstack([state.A, np.zeros((ratings.m, 1), dtype=np.int8)])
    state.B = np.hstack([state.B, np.ones((ratings.n, 1), dtype=np.int8)])
    state.theta = np.append(state.theta, 5.0)
    before = [log_lik_row(u, ratings, state.allocation, state.params) for u in range(ratings.m)]

    compact(state)

    # Assertions
    assert state.K == 2
    after = [log_lik_row(u, ratings, state.allocation, state.params) for u in range(ratings.m)]
    assert after == pytest.approx(before, abs=1e-12)


def test_new_feature_rate_basis(ratings):
    assert new_feature_rate(make_state(ratings, hyper=Hyperparams(lam=3.0))) == pytest.approx(1.0)
    users_rate = make_state(ratings, hyper=Hyperparams(lam=3.0, new_feature_rate="users"))
    assert new_feature_rate(users_rate) == pytest.approx(0.75)


def test_chain_config_validation():
    assert ChainConfig(iterations=10).resolved_burn_in == 5
    assert ChainConfig(iterations=20, burn_in=5, thin=3).n_stored() == 5
    with pytest.raises(DomainError):
        ChainConfig(iterations=0)
    with pytest.raises(DomainError):
        ChainConfig(iterations=10, thin=0)
    with pytest.raises(DomainError):
        ChainConfig(iterations=10, burn_in=10)
    with pytest.raises(DomainError):
        ChainConfig(init="random")


def test_run_chain_stores_thinned_draws(ratings):
    config = ChainConfig(iterations=20, burn_in=5, thin=3, seed=12)
    states = []

    def check(state):
        states.append(state.iteration)
        assert np.all(state.A.sum(axis=0) > 0)
        assert state.B.shape == (ratings.n, state.K)
        assert state.theta.shape == (state.K,)
        assert LatentScores(state.z).consistent_with(ratings)
        assert state.tau > 0 and 0 < state.pB < 1

    draws = run_chain(ratings, config, callback=check)

    # Assertions
    assert len(draws) == config.n_stored()
    assert [d.iteration for d in draws] == [8, 11, 14, 17, 20]
    assert states == list(range(1, 21))


def test_run_chain_is_deterministic(ratings):
    config = ChainConfig(iterations=15, burn_in=5, thin=2, seed=13)
    first = [format_draw(d) for d in run_chain(ratings, config)]
    second = [format_draw(d) for d in run_chain(ratings, config)]
    other = [format_draw(d) for d in run_chain(ratings, ChainConfig(iterations=15, burn_in=5, thin=2, seed=14))]

    # Assertions
    assert first == second
    assert first != other


def test_run_chain_rejects_empty_ratings():
    with pytest.raises(DomainError):
        run_chain(RatingMatrix.from_entries(3, 3, []), ChainConfig(iterations=2))
    with pytest.raises(DomainError):
        init_state(RatingMatrix.from_entries(0, 3, []), ChainConfig(iterations=2))


def test_run_chain_with_mf_initialization(ratings):
    config = ChainConfig(iterations=4, burn_in=0, thin=1, seed=15, init="mf", mf_k_grid=(2,),
                         mf_lambda_grid=(0.05,), mf_folds=2, mf_epochs=5)
    draws = run_chain(ratings, config)
    assert len(draws) == 4


def test_chain_without_ratings_recovers_ibp_prior():
    # With no observations the A-marginal of the chain is the IBP prior when m = n
    m = n = 5
    lam, n_draws, thin = 2.0, 2000, 10
    empty = RatingMatrix.from_entries(m, n, [])
    state = init_state(empty, ChainConfig(iterations=2, seed=16, hyperparams=Hyperparams(lam=lam)))
    for _ in range(500):
        sweep(state, empty)

    chain_K = []
    for _ in range(n_draws):
        for _ in range(thin):
            sweep(state, empty)
        chain_K.append(state.K)
    chain_K = np.array(chain_K)
    rng = np.random.default_rng(116)
    prior_K = np.array([sample_prior(m, lam, rng).K for _ in range(n_draws)])

    # Pool the upper tail so every cell holds at least five draws
    cap = max(v for v in range(1, 60) if min((chain_K >= v).sum(), (prior_K >= v).sum()) >= 5)
    table = np.array([np.bincount(np.minimum(K, cap), minlength=cap + 1) for K in (chain_K, prior_K)])
    table = table[:, table.min(axis=0) > 0]

    # Assertions
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_chain_fits_item_only_ratings():
    # Every user gives item i the rating i + 1
    m, n = 12, 5
    entries = [(u, i, i + 1) for u in range(m) for i in range(n)]
    ratings = RatingMatrix.from_entries(m, n, entries)
    draws = run_chain(ratings, ChainConfig(iterations=60, burn_in=30, thin=3, seed=17))

    predicted = predictive_distribution(ratings.users, ratings.items, draws).predicted()
    assert np.mean(predicted == ratings.ratings) >= 0.9
