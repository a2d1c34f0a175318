"""
Regularized matrix factorization baseline.

Ratings are approximated by ``p_u^T q_i`` and the factors are fit by
per-entry stochastic gradient descent on

    E = 1/2 sum I_ui (r_ui - p_u^T q_i)^2 + lambda_P/2 sum |p_u|^2 + lambda_Q/2 sum |q_i|^2

Regularization is applied at every visited entry.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import DomainError, TrainingDivergenceError
from .core import N_LEVELS, RatingMatrix

logger = logging.getLogger(__name__)

INIT_SD = 0.1


@dataclass
class MfModel:
    """Factor matrices ``P`` (k x m) and ``Q`` (k x n) plus the settings they were trained with."""

    k: int
    P: np.ndarray
    Q: np.ndarray
    lambda_P: float = 0.0
    lambda_Q: float = 0.0
    lr: float = 0.01
    epochs: int = 0
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise DomainError(f"rank must be at least 1, got {self.k}")
        if self.P.shape[0] != self.k or self.Q.shape[0] != self.k:
            raise DomainError("factor matrices must have k rows")


def mf_objective(P: np.ndarray, Q: np.ndarray, ratings: RatingMatrix,
                 lambda_P: float, lambda_Q: float) -> float:
    preds = np.einsum("ke,ke->e", P[:, ratings.users], Q[:, ratings.items])
    sse = 0.5 * np.sum((ratings.ratings - preds) ** 2)
    return float(sse + 0.5 * lambda_P * np.sum(P ** 2) + 0.5 * lambda_Q * np.sum(Q ** 2))


def entry_gradients(p: np.ndarray, q: np.ndarray, r: float,
                    lambda_P: float, lambda_Q: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of 1/2 (r - p.q)^2 + lambda_P/2 |p|^2 + lambda_Q/2 |q|^2."""
    err = r - p @ q
    return -err * q + lambda_P * p, -err * p + lambda_Q * q


def sgd_step(p: np.ndarray, q: np.ndarray, r: float, lambda_P: float, lambda_Q: float,
             lr: float) -> Tuple[np.ndarray, np.ndarray]:
    grad_p, grad_q = entry_gradients(p, q, r, lambda_P, lambda_Q)
    return p - lr * grad_p, q - lr * grad_q


def train_mf(ratings: RatingMatrix, k: int, lambda_P: float = 0.02, lambda_Q: float = 0.02,
             lr: float = 0.01, epochs: int = 50,
             rng: Optional[np.random.Generator] = None) -> MfModel:
    """
    Fit factors by SGD over the observed entries in a freshly shuffled order each epoch.

    Args:
        ratings: Training ratings
        k: Latent rank
        lambda_P: User-factor regularization
        lambda_Q: Item-factor regularization
        lr: Learning rate
        epochs: Passes over the data
        rng: Random source for the initial factors and the visiting order

    Returns:
        Trained MfModel with the per-epoch objective in ``history``

    Raises:
        TrainingDivergenceError: if the objective stops being finite
    """
    if k < 1 or lr <= 0 or epochs < 1:
        raise DomainError(f"need k >= 1, lr > 0 and epochs >= 1 (got k={k}, lr={lr}, epochs={epochs})")
    rng = rng if rng is not None else np.random.default_rng()

    P = rng.normal(0.0, INIT_SD, (k, ratings.m))
    Q = rng.normal(0.0, INIT_SD, (k, ratings.n))
    users, items = ratings.users, ratings.items
    values = ratings.ratings.astype(float)
    history = []

    for epoch in range(1, epochs + 1):
        for e in rng.permutation(ratings.n_obs):
            u, i = users[e], items[e]
            P[:, u], Q[:, i] = sgd_step(P[:, u].copy(), Q[:, i].copy(), values[e], lambda_P, lambda_Q, lr)
        objective = mf_objective(P, Q, ratings, lambda_P, lambda_Q)
        if not np.isfinite(objective):
            logger.error(f"MF training diverged at epoch {epoch}")
            raise TrainingDivergenceError(epoch, objective)
        history.append(objective)

    logger.info(f"Trained rank-{k} MF for {epochs} epochs, final objective {history[-1]:.4f}")
    return MfModel(k, P, Q, lambda_P, lambda_Q, lr, epochs, history)


def predict_mf(model: MfModel, u: int, i: int) -> float:
    return float(model.P[:, u] @ model.Q[:, i])


def predict_mf_many(model: MfModel, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    return np.einsum("ke,ke->e", model.P[:, users], model.Q[:, items])


def round_ratings(scores: np.ndarray) -> np.ndarray:
    """Nearest rating with halves rounded up, clipped to 1..5."""
    return np.clip(np.floor(np.asarray(scores, dtype=float) + 0.5), 1, N_LEVELS).astype(np.int64)


def mf_rating(model: MfModel, u: int, i: int) -> int:
    return int(round_ratings(np.array([predict_mf(model, u, i)]))[0])


def _subset(ratings: RatingMatrix, mask: np.ndarray) -> RatingMatrix:
    return RatingMatrix(ratings.m, ratings.n, ratings.users[mask], ratings.items[mask], ratings.ratings[mask])


def cv_select_rank(ratings: RatingMatrix, k_grid: Sequence[int],
                   lambda_grid: Iterable[Union[float, Tuple[float, float]]], folds: int = 5,
                   rng: Optional[np.random.Generator] = None, lr: float = 0.01,
                   epochs: int = 50) -> Tuple[int, float, float]:
    """
    Grid search over rank and regularization by k-fold held-out RMSE.

    Each ``lambda_grid`` element is either one value shared by users and items
    or a ``(lambda_P, lambda_Q)`` pair. Ties go to the smaller rank.
    """
    if folds < 2:
        raise DomainError(f"need at least 2 folds, got {folds}")
    lambdas = [(lam, lam) if np.isscalar(lam) else tuple(lam) for lam in lambda_grid]
    ks = sorted(k_grid)
    if not ks or not lambdas:
        raise DomainError("rank and regularization grids must be non-empty")
    rng = rng if rng is not None else np.random.default_rng()

    fold_of = rng.permutation(ratings.n_obs) % folds
    fold_seeds = rng.integers(0, 2**32, size=folds)
    best, best_rmse = None, np.inf
    for k, (lam_p, lam_q) in itertools.product(ks, lambdas):
        errors = []
        for f in range(folds):
            train = _subset(ratings, fold_of != f)
            held = fold_of == f
            model = train_mf(train, k, lam_p, lam_q, lr, epochs, np.random.default_rng(fold_seeds[f]))
            preds = predict_mf_many(model, ratings.users[held], ratings.items[held])
            errors.append(np.sqrt(np.mean((ratings.ratings[held] - preds) ** 2)))
        score = float(np.mean(errors))
        logger.debug(f"CV k={k} lambda=({lam_p}, {lam_q}) rmse={score:.4f}")
        if score < best_rmse:
            best, best_rmse = (k, lam_p, lam_q), score

    logger.info(f"Selected MF rank {best[0]} with lambda=({best[1]}, {best[2]}), CV RMSE {best_rmse:.4f}")
    return best
