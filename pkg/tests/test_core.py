import math

import numpy as np
import pytest
from scipy import stats

from dfa_recommender.exceptions import DomainError, RatingsValidationError
from dfa_recommender.model.core import (FeatureAllocation, Hyperparams, LatentScores, McmcDraw, ModelParams,
                                        RatingMatrix, category_prob, category_probs, log_category_prob,
                                        log_lik_row, probit_mean, probit_means, rating_from_score,
                                        ratings_from_scores)


@pytest.fixture
def small_model():
    A = np.array([[1, 0], [1, 1], [0, 0]])
    B = np.array([[1, 1], [0, 1]])
    params = ModelParams(theta=np.array([0.5, -1.0]), rho=np.array([0.2, 0.0]), tau=0.5)
    return FeatureAllocation(A, B), params


@pytest.fixture
def ratings():
    return RatingMatrix.from_entries(3, 2, [(0, 0, 4), (0, 1, 2), (1, 0, 1), (2, 1, 5)])


def test_rating_brackets_are_half_open():
    assert rating_from_score(-7.0) == 1
    assert rating_from_score(1.0) == 1
    assert rating_from_score(1.0 + 1e-9) == 2
    assert rating_from_score(3.0) == 3
    assert rating_from_score(4.0) == 4
    assert rating_from_score(4.0 + 1e-9) == 5
    assert rating_from_score(1e6) == 5


def test_rating_from_score_rejects_non_finite():
    with pytest.raises(DomainError):
        rating_from_score(float("nan"))
    with pytest.raises(DomainError):
        ratings_from_scores(np.array([1.5, np.inf]))


def test_ratings_from_scores_matches_scalar():
    z = np.array([-2.0, 0.99, 1.0, 1.01, 2.5, 3.999, 4.0, 4.2, 9.0])
    expected = [rating_from_score(v) for v in z]
    assert ratings_from_scores(z).tolist() == expected


def test_category_probs_sum_to_one():
    means = np.array([-5.0, 0.3, 2.5, 3.7, 12.0])
    probs = category_probs(means, 0.8)

    # Assertions
    assert probs.shape == (5, 5)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.all(probs >= 0)


def test_category_prob_matches_normal_cdf():
    mean, tau = 2.3, 0.7
    expected = stats.norm.cdf(3.0, mean, tau) - stats.norm.cdf(2.0, mean, tau)
    assert category_prob(mean, tau, 3) == pytest.approx(expected, rel=1e-12)
    assert category_prob(mean, tau, 1) == pytest.approx(stats.norm.cdf(1.0, mean, tau), rel=1e-12)
    assert category_prob(mean, tau, 5) == pytest.approx(stats.norm.sf(4.0, mean, tau), rel=1e-12)


def test_category_prob_rejects_bad_arguments():
    with pytest.raises(DomainError):
        category_prob(2.5, 0.0, 3)
    with pytest.raises(DomainError):
        category_prob(2.5, 1.0, 6)
    with pytest.raises(DomainError):
        category_prob(2.5, 1.0, 0)


def test_log_category_prob_is_finite_far_in_the_tails():
    # Test data
    means = np.array([100.0, -100.0, 100.0, -100.0])
    x = np.array([1, 5, 3, 3])

    # Assertions
    out = log_category_prob(means, 0.25, x)
    assert np.all(np.isfinite(out))
    assert np.all(out < -1000)


def test_log_category_prob_agrees_with_direct_computation():
    means = np.array([0.4, 2.2, 3.1, 4.6])
    x = np.array([1, 2, 4, 5])
    direct = np.log(category_probs(means, 0.6)[np.arange(4), x - 1])
    assert np.allclose(log_category_prob(means, 0.6, x), direct)


def test_probit_mean_sums_shared_features(small_model):
    alloc, params = small_model

    # Assertions
    assert probit_mean(1, 0, alloc, params) == pytest.approx(2.5 + 0.5 - 1.0 + 0.2)
    assert probit_mean(0, 1, alloc, params) == pytest.approx(2.5)
    assert probit_mean(2, 0, alloc, params) == pytest.approx(2.7)


def test_probit_means_matches_scalar(small_model):
    alloc, params = small_model
    users, items = np.divmod(np.arange(6), 2)
    vectorized = probit_means(users, items, alloc.A, alloc.B, params.theta, params.rho, params.b0)
    scalar = [probit_mean(u, i, alloc, params) for u, i in zip(users, items)]
    assert np.allclose(vectorized, scalar)


def test_probit_mean_out_of_range(small_model):
    alloc, params = small_model
    with pytest.raises(IndexError):
        probit_mean(3, 0, alloc, params)
    with pytest.raises(IndexError):
        probit_mean(0, -1, alloc, params)


def test_log_lik_row(small_model, ratings):
    alloc, params = small_model
    items, r = ratings.row(0)
    expected = sum(math.log(category_prob(probit_mean(0, i, alloc, params), params.tau, int(x)))
                   for i, x in zip(items, r))
    assert log_lik_row(0, ratings, alloc, params) == pytest.approx(expected)


def test_log_lik_row_is_invariant_to_feature_order(small_model, ratings):
    alloc, params = small_model
    order = [1, 0]
    permuted = FeatureAllocation(alloc.A[:, order], alloc.B[:, order])
    permuted_params = ModelParams(params.theta[order], params.rho, params.tau)

    for u in range(ratings.m):
        assert log_lik_row(u, ratings, permuted, permuted_params) == \
            pytest.approx(log_lik_row(u, ratings, alloc, params), abs=1e-12)


def test_log_lik_row_is_unchanged_by_compaction(small_model, ratings):
    # Test data: an extra feature no user belongs to, with a large effect
    alloc, params = small_model
    padded = FeatureAllocation(np.hstack([alloc.A, np.zeros((3, 1))]), np.hstack([alloc.B, np.ones((2, 1))]))
    padded_params = ModelParams(np.append(params.theta, 7.5), params.rho, params.tau)

    compacted, keep = padded.compact()
    compacted_params = ModelParams(padded_params.theta[keep], params.rho, params.tau)

    # Assertions
    assert compacted.K == 2
    for u in range(ratings.m):
        expected = log_lik_row(u, ratings, padded, padded_params)
        assert log_lik_row(u, ratings, compacted, compacted_params) == pytest.approx(expected, abs=1e-12)


def test_log_lik_row_of_user_without_ratings(small_model):
    alloc, params = small_model
    empty = RatingMatrix.from_entries(3, 2, [(0, 0, 3)])
    assert log_lik_row(2, empty, alloc, params) == 0.0
    with pytest.raises(IndexError):
        log_lik_row(5, empty, alloc, params)


def test_rating_matrix_indexes(ratings):
    # Assertions
    assert ratings.n_obs == 4
    assert ratings.user_counts().tolist() == [2, 1, 1]
    assert ratings.item_counts().tolist() == [2, 2]
    items, r = ratings.row(0)
    assert sorted(zip(items.tolist(), r.tolist())) == [(0, 4), (1, 2)]
    users, r = ratings.col(1)
    assert sorted(zip(users.tolist(), r.tolist())) == [(0, 2), (2, 5)]


def test_rating_matrix_frame_round_trip(ratings):
    df = ratings.to_frame(one_based=True)
    assert df["user"].min() == 1
    back = RatingMatrix.from_frame(ratings.to_frame(), ratings.m, ratings.n)
    assert back.to_frame().equals(ratings.to_frame())


def test_rating_matrix_rejects_duplicates():
    with pytest.raises(RatingsValidationError, match="duplicate"):
        RatingMatrix.from_entries(2, 2, [(0, 1, 3), (1, 0, 2), (0, 1, 4)])


def test_rating_matrix_rejects_out_of_range_values():
    with pytest.raises(RatingsValidationError):
        RatingMatrix.from_entries(2, 2, [(0, 0, 6)])
    with pytest.raises(RatingsValidationError):
        RatingMatrix.from_entries(2, 2, [(0, 2, 3)])
    with pytest.raises(RatingsValidationError):
        RatingMatrix.from_entries(2, 2, [(-1, 0, 3)])


def test_rating_matrix_is_read_only(ratings):
    with pytest.raises(ValueError):
        ratings.ratings[0] = 1


def test_feature_allocation_validation():
    with pytest.raises(DomainError):
        FeatureAllocation(np.ones((2, 2)), np.ones((3, 1)))
    with pytest.raises(DomainError):
        FeatureAllocation(np.array([[2]]), np.array([[1]]))

    alloc = FeatureAllocation(np.array([[1, 0], [0, 0]]), np.array([[1, 1]]))
    compacted, keep = alloc.compact()
    assert compacted.K == 1
    assert keep.tolist() == [True, False]


def test_latent_scores_consistency(ratings):
    good = LatentScores(np.array([3.5, 1.2, 0.0, 4.1]))
    bad = LatentScores(np.array([3.0, 1.2, 0.0, 4.1]))
    assert good.consistent_with(ratings)
    assert not bad.consistent_with(ratings)


def test_mcmc_draw_shape_checks(small_model):
    alloc, params = small_model
    with pytest.raises(DomainError):
        McmcDraw(alloc, ModelParams(np.zeros(3), params.rho, 1.0), 0)
    with pytest.raises(DomainError):
        McmcDraw(alloc, ModelParams(params.theta, np.zeros(5), 1.0), 0)

    draw = McmcDraw(alloc, params, 7)
    moved = draw.with_rho(np.array([1.0, -1.0]))
    assert moved.params.rho.tolist() == [1.0, -1.0]
    assert moved.iteration == 7
    assert draw.params.rho.tolist() == [0.2, 0.0]


def test_model_params_reject_bad_tau():
    with pytest.raises(DomainError):
        ModelParams(np.zeros(0), np.zeros(1), 0.0)
    with pytest.raises(DomainError):
        ModelParams(np.zeros(0), np.zeros(1), float("inf"))


def test_hyperparams_validation():
    assert Hyperparams().pB_prior == (1.0, 9.0)
    with pytest.raises(DomainError):
        Hyperparams(lam=0)
    with pytest.raises(DomainError):
        Hyperparams(pB=1.0)
    with pytest.raises(DomainError):
        Hyperparams(tau_prior=(0.0, 1.0))
    with pytest.raises(DomainError):
        Hyperparams(new_feature_rate="cells")
