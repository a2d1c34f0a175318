"""
Posterior predictive ratings and the evaluation metrics built on them.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import stats

from ..exceptions import DomainError
from ..model.consensus import GlobalRho
from ..model.core import N_LEVELS, McmcDraw, RatingMatrix, category_probs, probit_means

logger = logging.getLogger(__name__)

CI_LEVEL = 0.95


@dataclass(frozen=True)
class PredictiveEntry:
    user: int
    item: int
    probs: np.ndarray
    mean_score: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class PredictiveDistribution:
    """Posterior predictive rating probabilities and probit-score summaries for a batch of (user, item) queries."""

    users: np.ndarray
    items: np.ndarray
    probs: np.ndarray
    mean_score: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray

    def __len__(self) -> int:
        return int(self.users.size)

    def entry(self, j: int) -> PredictiveEntry:
        return PredictiveEntry(int(self.users[j]), int(self.items[j]), self.probs[j],
                               float(self.mean_score[j]), float(self.ci_lo[j]), float(self.ci_hi[j]))

    def predicted(self) -> np.ndarray:
        return predict_ratings(self.probs)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"user": self.users, "item": self.items})
        for x in range(N_LEVELS):
            df[f"p{x + 1}"] = self.probs[:, x]
        df["predicted"] = self.predicted()
        df["score"] = self.mean_score
        df["ci_lo"] = self.ci_lo
        df["ci_hi"] = self.ci_hi
        return df


def _draw_scores(users: np.ndarray, items: np.ndarray, ensemble: Sequence[McmcDraw]) -> np.ndarray:
    return np.stack([
        probit_means(users, items, d.allocation.A, d.allocation.B, d.params.theta, d.params.rho, d.params.b0)
        for d in ensemble
    ])


def posterior_mean_scores(users: np.ndarray, items: np.ndarray, ensemble: Sequence[McmcDraw]) -> np.ndarray:
    if not ensemble:
        raise DomainError("prediction needs a non-empty ensemble")
    return _draw_scores(np.asarray(users), np.asarray(items), ensemble).mean(axis=0)


def predictive_distribution(users: np.ndarray, items: np.ndarray,
                            ensemble: Sequence[McmcDraw]) -> PredictiveDistribution:
    """
    Average the category probabilities of every draw for each query.

    Args:
        users: User indices of the queries
        items: Item indices of the queries
        ensemble: Posterior draws to average over

    Returns:
        PredictiveDistribution with per-query probabilities, mean probit
        score and the central 95% interval of per-draw probit means
    """
    if not ensemble:
        raise DomainError("prediction needs a non-empty ensemble")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    scores = _draw_scores(users, items, ensemble)
    probs = np.zeros((users.size, N_LEVELS))
    for t, draw in enumerate(ensemble):
        probs += category_probs(scores[t], draw.params.tau)
    probs /= len(ensemble)
    tail = (1 - CI_LEVEL) / 2
    lo, hi = np.quantile(scores, [tail, 1 - tail], axis=0)
    return PredictiveDistribution(users, items, probs, scores.mean(axis=0), lo, hi)


def posterior_category_probs(u: int, i: int, ensemble: Sequence[McmcDraw]) -> PredictiveEntry:
    return predictive_distribution(np.array([u]), np.array([i]), ensemble).entry(0)


def predict_rating(probs: Union[PredictiveEntry, np.ndarray]) -> int:
    """Most probable rating; ties go to the lower category."""
    if isinstance(probs, PredictiveEntry):
        probs = probs.probs
    return int(np.argmax(probs)) + 1


def predict_ratings(probs: np.ndarray) -> np.ndarray:
    return np.argmax(probs, axis=1) + 1


@dataclass(frozen=True)
class AccuracyEstimate:
    value: float
    ci_lo: float
    ci_hi: float
    n: int


def _aligned(truth, predictions):
    truth = np.asarray(truth)
    predictions = np.asarray(predictions)
    if truth.shape != predictions.shape:
        raise DomainError(f"truth has {truth.size} entries but predictions have {predictions.size}")
    if truth.size == 0:
        raise DomainError("accuracy is undefined for an empty list")
    return truth, predictions


def binomial_ci(p: float, n: int, alpha: float = 1 - CI_LEVEL):
    """Normal-approximation interval p +/- z_{1-alpha/2} sqrt(p(1-p)/n)."""
    half = stats.norm.ppf(1 - alpha / 2) * np.sqrt(p * (1 - p) / n)
    return p - half, p + half


def exact_accuracy(truth, predictions) -> float:
    truth, predictions = _aligned(truth, predictions)
    return float(np.mean(truth == predictions))


def within_k_star_accuracy(truth, predictions, k: int = 1, alpha: float = 1 - CI_LEVEL) -> AccuracyEstimate:
    truth, predictions = _aligned(truth, predictions)
    p = float(np.mean(np.abs(truth - predictions) <= k))
    lo, hi = binomial_ci(p, truth.size, alpha)
    return AccuracyEstimate(p, float(lo), float(hi), int(truth.size))


def rmse(truth, predictions) -> float:
    truth, predictions = _aligned(truth, predictions)
    return float(np.sqrt(np.mean((truth.astype(float) - predictions) ** 2)))


def per_user_accuracy(users, truth, predictions) -> pd.Series:
    truth, predictions = _aligned(truth, predictions)
    hits = pd.Series(truth == predictions, index=np.asarray(users))
    return hits.groupby(level=0).mean().rename("accuracy")


def top_n_accuracy(users, truth, predictions, scores, n: int = 10) -> pd.Series:
    """Per-user exact accuracy over each user's ``n`` held-out items with the highest predicted score."""
    truth, predictions = _aligned(truth, predictions)
    df = pd.DataFrame({"user": np.asarray(users), "hit": truth == predictions, "score": np.asarray(scores)})
    df = df.sort_values(["user", "score"], ascending=[True, False], kind="stable")
    return df.groupby("user").head(n).groupby("user")["hit"].mean().rename("top_n_accuracy")


def top_L_items(global_rho: GlobalRho, L: int) -> np.ndarray:
    """Items by merged posterior mean of rho, highest first; ties go to the lower index."""
    mean = np.asarray(global_rho.mean)
    if not 0 <= L <= mean.size:
        raise DomainError(f"L must lie in [0, {mean.size}], got {L}")
    return np.lexsort((np.arange(mean.size), -mean))[:L]


@dataclass(frozen=True)
class PairwiseResult:
    correct: int
    counted: int
    users: int
    shard: Optional[int] = None

    @property
    def accuracy(self) -> float:
        return self.correct / self.counted if self.counted else float("nan")


def pairwise_preference_eval(train: RatingMatrix, holdout: RatingMatrix, ensemble: Sequence[McmcDraw],
                             shard: Optional[int] = None) -> PairwiseResult:
    """
    Compare each user's held-out item against every trained item with a different rating.

    A pair is correct when the posterior mean probit scores order the two
    items the same way the observed ratings do; predicted ties count as
    wrong. Users without comparable pairs are left out.
    """
    counts = holdout.user_counts()
    if np.any(counts > 1):
        raise DomainError("pairwise evaluation expects at most one held-out item per user")
    has_test = counts == 1
    test_item = np.full(holdout.m, -1, dtype=np.int64)
    test_rating = np.zeros(holdout.m, dtype=np.int64)
    test_item[holdout.users] = holdout.items
    test_rating[holdout.users] = holdout.ratings

    pair = has_test[train.users] & (train.ratings != test_rating[train.users])
    if not pair.any():
        return PairwiseResult(0, 0, 0, shard)
    users = train.users[pair]
    scores = posterior_mean_scores(
        np.concatenate([users, holdout.users]),
        np.concatenate([train.items[pair], holdout.items]),
        ensemble,
    )
    trained_score = scores[:users.size]
    test_score = np.zeros(holdout.m)
    test_score[holdout.users] = scores[users.size:]

    diff = test_score[users] - trained_score
    truth = np.sign(test_rating[users] - train.ratings[pair])
    correct = (np.sign(diff) == truth) & (diff != 0)
    result = PairwiseResult(int(correct.sum()), int(pair.sum()), int(np.unique(users).size), shard)
    logger.info(f"Pairwise accuracy {result.accuracy:.4f} over {result.counted} pairs from {result.users} users")
    return result


@dataclass
class EvalReport:
    """Metric rows destined for the evaluation CSV (metric, shard, value, ci_lo, ci_hi, n)."""

    rows: List[dict] = field(default_factory=list)

    def add(self, metric: str, value: float, n: int, shard: Union[int, str] = "all",
            ci: Optional[Sequence[float]] = None, proportion: bool = True) -> None:
        if ci is None and proportion and n > 0:
            ci = binomial_ci(value, n)
        lo, hi = ci if ci is not None else (float("nan"), float("nan"))
        self.rows.append({"metric": metric, "shard": shard, "value": float(value),
                          "ci_lo": float(lo), "ci_hi": float(hi), "n": int(n)})

    def add_pairwise(self, metric: str, results: Sequence[PairwiseResult]) -> None:
        for res in results:
            if res.counted:
                self.add(metric, res.accuracy, res.counted, "all" if res.shard is None else res.shard)
        if len(results) > 1:
            correct = sum(r.correct for r in results)
            counted = sum(r.counted for r in results)
            if counted:
                self.add(metric, correct / counted, counted)

    def value(self, metric: str, shard: Union[int, str] = "all") -> float:
        for row in self.rows:
            if row["metric"] == metric and row["shard"] == shard:
                return row["value"]
        raise KeyError(f"{metric} for shard {shard}")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["metric", "shard", "value", "ci_lo", "ci_hi", "n"])
