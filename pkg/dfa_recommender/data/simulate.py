"""
Synthetic ratings drawn from the double-IBP ordinal probit model, with the
generating truth kept for recovery checks, and train/test holdout splits.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from ..exceptions import DomainError
from ..model.core import BASELINE, FeatureAllocation, ModelParams, RatingMatrix, probit_means, ratings_from_scores
from ..model.ibp import sample_prior

logger = logging.getLogger(__name__)

PER_USER_ONE_TEST = "per_user_one_test"


@dataclass(frozen=True)
class SimTruth:
    """Generating parameters of a simulated dataset plus the dense scores and ratings before masking."""

    allocation: FeatureAllocation
    params: ModelParams
    include_rho: bool
    z: np.ndarray
    dense_ratings: np.ndarray

    @property
    def K(self) -> int:
        return self.allocation.K


@dataclass(frozen=True)
class HoldoutMode:
    """Either a global test fraction ``f`` or one held-out rating per user."""

    fraction: Optional[float] = 0.2
    per_user: bool = False

    def __post_init__(self):
        if not self.per_user and not (self.fraction is not None and 0 < self.fraction < 1):
            raise DomainError(f"test fraction must lie in (0, 1), got {self.fraction}")

    @classmethod
    def parse(cls, text: Union[str, float, "HoldoutMode"]) -> "HoldoutMode":
        """``"per_user_one_test"`` or a fraction such as ``"0.2"``."""
        if isinstance(text, HoldoutMode):
            return text
        if str(text).strip() == PER_USER_ONE_TEST:
            return cls(fraction=None, per_user=True)
        try:
            return cls(fraction=float(text))
        except ValueError:
            raise DomainError(f"holdout must be a fraction or {PER_USER_ONE_TEST!r}, got {text!r}")

    def describe(self) -> str:
        return PER_USER_ONE_TEST if self.per_user else f"{self.fraction}"


def generate_dataset(m: int, n: int, lam: float = 3.0, pB: float = 0.2, theta_sd: float = 2.0,
                     tau: float = 0.25, b0: float = BASELINE, include_rho: bool = False,
                     rng: Optional[np.random.Generator] = None,
                     rho_sd: float = 1.0) -> Tuple[SimTruth, RatingMatrix]:
    """
    Draw a complete m x n rating matrix from the model.

    Args:
        m: Number of users
        n: Number of items
        lam: IBP mass parameter for the user allocation
        pB: Bernoulli probability of an item joining each feature
        theta_sd: Standard deviation of the feature effects
        tau: Standard deviation of the probit scores
        b0: Baseline score
        include_rho: Whether to add item effects drawn from N(0, rho_sd^2)
        rng: Random source
        rho_sd: Standard deviation of the item effects

    Returns:
        Tuple of (SimTruth, RatingMatrix holding every cell)
    """
    if m < 1 or n < 1:
        raise DomainError(f"need m, n >= 1, got {m}x{n}")
    if not 0 <= pB <= 1:
        raise DomainError(f"pB must lie in [0, 1], got {pB}")
    if lam <= 0 or theta_sd < 0 or tau <= 0 or rho_sd < 0:
        raise DomainError("lambda and tau must be positive, standard deviations non-negative")
    rng = rng if rng is not None else np.random.default_rng()

    A = sample_prior(m, lam, rng).A
    K = A.shape[1]
    B = (rng.random((n, K)) < pB).astype(np.int8)
    theta = rng.normal(0.0, theta_sd, K)
    rho = rng.normal(0.0, rho_sd, n) if include_rho else np.zeros(n)

    users, items = np.divmod(np.arange(m * n), n)
    means = probit_means(users, items, A, B, theta, rho, b0)
    z = means + tau * rng.standard_normal(m * n)
    ratings = ratings_from_scores(z)

    truth = SimTruth(FeatureAllocation(A, B), ModelParams(theta, rho, tau, b0), include_rho,
                     z.reshape(m, n), ratings.reshape(m, n))
    logger.info(f"Simulated {m}x{n} ratings with K={K} features")
    return truth, RatingMatrix(m, n, users, items, ratings)


def _split(ratings: RatingMatrix, test_mask: np.ndarray) -> Tuple[RatingMatrix, RatingMatrix]:
    def take(mask):
        return RatingMatrix(ratings.m, ratings.n, ratings.users[mask], ratings.items[mask], ratings.ratings[mask])
    return take(~test_mask), take(test_mask)


def holdout_split(ratings: RatingMatrix, mode: Union[HoldoutMode, str, float],
                  rng: Optional[np.random.Generator] = None) -> Tuple[RatingMatrix, RatingMatrix]:
    """
    Split observed ratings into disjoint train and test sets.

    A global fraction ``f`` sends ``floor(f * N)`` uniformly chosen entries to
    the test set. Per-user mode sends one uniformly chosen entry of every
    user to the test set and requires at least two ratings per user.
    """
    mode = HoldoutMode.parse(mode)
    rng = rng if rng is not None else np.random.default_rng()
    test_mask = np.zeros(ratings.n_obs, dtype=bool)

    if mode.per_user:
        counts = ratings.user_counts()
        short = np.flatnonzero(counts < 2)
        if short.size:
            raise DomainError(f"user {int(short[0])} has {int(counts[short[0]])} ratings; "
                              f"per-user holdout needs at least 2")
        for u in range(ratings.m):
            test_mask[rng.choice(ratings.row_entries(u))] = True
    else:
        n_test = math.floor(mode.fraction * ratings.n_obs)
        test_mask[rng.choice(ratings.n_obs, size=n_test, replace=False)] = True

    train, test = _split(ratings, test_mask)
    logger.info(f"Holdout {mode.describe()}: {train.n_obs} train, {test.n_obs} test ratings")
    return train, test
