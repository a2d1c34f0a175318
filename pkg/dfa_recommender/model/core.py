"""
Core domain types and the ordinal probit link.

Ratings live on the 1..5 scale. A latent probit score z maps to rating x
when it falls in the half-open bracket (x-1, x], with the two end categories
extending to -inf and +inf. Every module builds on the types and likelihood
primitives defined here.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import special

from ..exceptions import DomainError, RatingsValidationError

logger = logging.getLogger(__name__)

N_LEVELS = 5
BASELINE = 2.5

# Bracket bounds indexed by rating - 1
LOWER_BOUNDS = np.array([-np.inf, 1.0, 2.0, 3.0, 4.0])
UPPER_BOUNDS = np.array([1.0, 2.0, 3.0, 4.0, np.inf])


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class RatingMatrix:
    """
    Sparse ordinal ratings in coordinate form with row and column indexes.

    Entry ``e`` is the triple ``(users[e], items[e], ratings[e])``. The row
    index lists, per user, the entry positions of that user's ratings; the
    column index does the same per item. Both are built once at construction.
    """

    m: int
    n: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    row_ptr: np.ndarray = field(init=False, repr=False)
    row_order: np.ndarray = field(init=False, repr=False)
    col_ptr: np.ndarray = field(init=False, repr=False)
    col_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).copy()
        items = np.asarray(self.items, dtype=np.int64).copy()
        ratings = np.asarray(self.ratings, dtype=np.int64).copy()

        if not (users.shape == items.shape == ratings.shape) or users.ndim != 1:
            raise RatingsValidationError("users, items and ratings must be aligned 1-d arrays")
        if self.m < 0 or self.n < 0:
            raise RatingsValidationError(f"invalid dimensions {self.m}x{self.n}")
        if users.size:
            if users.min() < 0 or users.max() >= self.m:
                raise RatingsValidationError(f"user index outside [0, {self.m})")
            if items.min() < 0 or items.max() >= self.n:
                raise RatingsValidationError(f"item index outside [0, {self.n})")
            bad = np.flatnonzero((ratings < 1) | (ratings > N_LEVELS))
            if bad.size:
                raise RatingsValidationError(f"rating {ratings[bad[0]]} at entry {bad[0]} is outside 1-{N_LEVELS}")
            keys = users * self.n + items
            _, first, counts = np.unique(keys, return_index=True, return_counts=True)
            if np.any(counts > 1):
                dup = int(np.sort(first[counts > 1])[0])
                raise RatingsValidationError(
                    f"duplicate rating for user {users[dup]}, item {items[dup]}"
                )

        row_order = np.argsort(users, kind="stable")
        col_order = np.argsort(items, kind="stable")
        row_ptr = np.concatenate([[0], np.cumsum(np.bincount(users, minlength=self.m))])
        col_ptr = np.concatenate([[0], np.cumsum(np.bincount(items, minlength=self.n))])

        object.__setattr__(self, "users", _frozen(users))
        object.__setattr__(self, "items", _frozen(items))
        object.__setattr__(self, "ratings", _frozen(ratings))
        object.__setattr__(self, "row_order", _frozen(row_order))
        object.__setattr__(self, "col_order", _frozen(col_order))
        object.__setattr__(self, "row_ptr", _frozen(row_ptr.astype(np.int64)))
        object.__setattr__(self, "col_ptr", _frozen(col_ptr.astype(np.int64)))

    @classmethod
    def from_entries(cls, m: int, n: int, entries: Iterable[Tuple[int, int, int]]) -> "RatingMatrix":
        triples = list(entries)
        if not triples:
            return cls(m, n, np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64))
        users, items, ratings = zip(*triples)
        return cls(m, n, np.array(users), np.array(items), np.array(ratings))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, m: Optional[int] = None, n: Optional[int] = None) -> "RatingMatrix":
        """Build from a frame with 0-based ``user``, ``item`` and ``rating`` columns."""
        users = df["user"].to_numpy(dtype=np.int64)
        items = df["item"].to_numpy(dtype=np.int64)
        m = int(users.max()) + 1 if m is None else m
        n = int(items.max()) + 1 if n is None else n
        return cls(m, n, users, items, df["rating"].to_numpy(dtype=np.int64))

    def to_frame(self, one_based: bool = False) -> pd.DataFrame:
        offset = 1 if one_based else 0
        return pd.DataFrame({
            "user": self.users + offset,
            "item": self.items + offset,
            "rating": self.ratings,
        })

    @property
    def n_obs(self) -> int:
        return int(self.ratings.size)

    def row_entries(self, u: int) -> np.ndarray:
        """Entry positions of user ``u``'s ratings."""
        return self.row_order[self.row_ptr[u]:self.row_ptr[u + 1]]

    def col_entries(self, i: int) -> np.ndarray:
        """Entry positions of the ratings given to item ``i``."""
        return self.col_order[self.col_ptr[i]:self.col_ptr[i + 1]]

    def row(self, u: int) -> Tuple[np.ndarray, np.ndarray]:
        """Items and ratings observed for user ``u``."""
        entries = self.row_entries(u)
        return self.items[entries], self.ratings[entries]

    def col(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Users and ratings observed for item ``i``."""
        entries = self.col_entries(i)
        return self.users[entries], self.ratings[entries]

    def user_counts(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.col_ptr)


@dataclass(frozen=True)
class FeatureAllocation:
    """Binary user-feature matrix ``A`` (m x K) and item-feature matrix ``B`` (n x K)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.int8).copy()
        B = np.asarray(self.B, dtype=np.int8).copy()
        if A.ndim != 2 or B.ndim != 2:
            raise DomainError("A and B must be 2-d")
        if A.shape[1] != B.shape[1]:
            raise DomainError(f"A has {A.shape[1]} columns but B has {B.shape[1]}")
        if np.any((A != 0) & (A != 1)) or np.any((B != 0) & (B != 1)):
            raise DomainError("A and B must be binary")
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "B", _frozen(B))

    @property
    def K(self) -> int:
        return int(self.A.shape[1])

    @classmethod
    def empty(cls, m: int, n: int) -> "FeatureAllocation":
        return cls(np.zeros((m, 0), np.int8), np.zeros((n, 0), np.int8))

    def compact(self) -> Tuple["FeatureAllocation", np.ndarray]:
        """Drop features no user belongs to; returns the allocation and the kept-column mask."""
        keep = self.A.sum(axis=0) > 0
        return FeatureAllocation(self.A[:, keep], self.B[:, keep]), keep


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray
    rho: np.ndarray
    tau: float
    b0: float = BASELINE

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise DomainError(f"tau must be positive and finite, got {self.tau}")
        object.__setattr__(self, "theta", _frozen(np.asarray(self.theta, dtype=float).copy()))
        object.__setattr__(self, "rho", _frozen(np.asarray(self.rho, dtype=float).copy()))


@dataclass(frozen=True)
class Hyperparams:
    """
    Prior settings for one chain.

    ``pB_prior`` is the Beta(a_p, b_p) hyperprior on the item inclusion
    probability; ``None`` keeps ``pB`` fixed. ``rho_prior`` is ``(mu0, sigma0)``
    and ``sigma0 = inf`` gives a flat prior. ``new_feature_rate`` selects the
    Poisson rate of the reversible-jump birth: ``"items"`` uses lambda/n,
    ``"users"`` uses lambda/m.
    """

    lam: float = 3.0
    pB: float = 0.1
    pB_prior: Optional[Tuple[float, float]] = (1.0, 9.0)
    sigma0_theta: float = 2.0
    tau_prior: Tuple[float, float] = (5.0, 1.0)
    rho_prior: Tuple[float, float] = (0.0, math.inf)
    b0: float = BASELINE
    new_feature_rate: str = "items"

    def __post_init__(self):
        if self.lam <= 0:
            raise DomainError(f"lambda must be positive, got {self.lam}")
        if not 0 < self.pB < 1:
            raise DomainError(f"pB must lie in (0, 1), got {self.pB}")
        if self.pB_prior is not None and min(self.pB_prior) <= 0:
            raise DomainError(f"Beta hyperprior parameters must be positive, got {self.pB_prior}")
        if self.sigma0_theta <= 0:
            raise DomainError("sigma0_theta must be positive")
        if min(self.tau_prior) <= 0:
            raise DomainError(f"inverse-gamma parameters must be positive, got {self.tau_prior}")
        if self.rho_prior[1] <= 0:
            raise DomainError("rho prior sd must be positive (inf for flat)")
        if self.new_feature_rate not in ("items", "users"):
            raise DomainError(f"unknown new_feature_rate {self.new_feature_rate!r}")


@dataclass(frozen=True)
class LatentScores:
    """One probit score per observed entry, aligned with ``RatingMatrix`` entries."""

    z: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(np.asarray(self.z, dtype=float).copy()))

    def consistent_with(self, ratings: RatingMatrix) -> bool:
        if self.z.shape != ratings.ratings.shape:
            return False
        lo, hi = rating_bounds(ratings.ratings)
        return bool(np.all((self.z > lo) & (self.z <= hi)))


@dataclass(frozen=True)
class McmcDraw:
    allocation: FeatureAllocation
    params: ModelParams
    iteration: int
    pB: float = 0.1

    def __post_init__(self):
        if self.params.theta.shape != (self.allocation.K,):
            raise DomainError(
                f"theta has length {self.params.theta.size}, allocation has K={self.allocation.K}"
            )
        if self.params.rho.shape != (self.allocation.B.shape[0],):
            raise DomainError("rho length must equal the item count")

    @property
    def K(self) -> int:
        return self.allocation.K

    def with_rho(self, rho: np.ndarray) -> "McmcDraw":
        params = ModelParams(self.params.theta, rho, self.params.tau, self.params.b0)
        return McmcDraw(self.allocation, params, self.iteration, self.pB)


def rating_bounds(ratings: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Lower and upper probit bracket bounds for an array of ratings."""
    idx = np.asarray(ratings, dtype=np.int64) - 1
    return LOWER_BOUNDS[idx], UPPER_BOUNDS[idx]


def probit_means(users: np.ndarray, items: np.ndarray, A: np.ndarray, B: np.ndarray,
                 theta: np.ndarray, rho: np.ndarray, b0: float = BASELINE) -> np.ndarray:
    """Vectorized ``b0 + sum_{k in K*_ui} theta_k + rho_i`` over aligned user/item arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    base = b0 + rho[items]
    if A.shape[1] == 0 or users.size == 0:
        return base.astype(float)
    shared = A[users].astype(float) * B[items]
    return base + shared @ theta


def probit_mean(u: int, i: int, alloc: FeatureAllocation, params: ModelParams) -> float:
    m, n = alloc.A.shape[0], alloc.B.shape[0]
    if not (0 <= u < m) or not (0 <= i < n):
        raise IndexError(f"(user {u}, item {i}) outside {m}x{n}")
    shared = alloc.A[u].astype(bool) & alloc.B[i].astype(bool)
    return float(params.b0 + params.theta[shared].sum() + params.rho[i])


def rating_from_score(z: float) -> int:
    if not math.isfinite(z):
        raise DomainError(f"probit score must be finite, got {z}")
    if z <= 1.0:
        return 1
    if z > 4.0:
        return 5
    return int(math.ceil(z))


def ratings_from_scores(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("probit scores must be finite")
    return np.clip(np.ceil(z), 1, N_LEVELS).astype(np.int64)


def log_interval_prob(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """
    log(Phi(hi) - Phi(lo)) for standardized bounds, stable in both tails.

    Intervals entirely above zero are reflected so the difference is always
    taken between the smaller CDF values.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    upper = lo > 0
    a = np.where(upper, -hi, lo)
    b = np.where(upper, -lo, hi)
    log_b = special.log_ndtr(b)
    log_a = special.log_ndtr(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_b + np.log1p(-np.exp(log_a - log_b))
    return out


def log_category_prob(mean: np.ndarray, tau: float, x: np.ndarray) -> np.ndarray:
    lo, hi = rating_bounds(x)
    return log_interval_prob((lo - mean) / tau, (hi - mean) / tau)


def category_probs(mean: np.ndarray, tau: float) -> np.ndarray:
    """Probabilities of all five ratings for each mean; shape ``mean.shape + (5,)``."""
    mean = np.asarray(mean, dtype=float)[..., None]
    lo = (LOWER_BOUNDS - mean) / tau
    hi = (UPPER_BOUNDS - mean) / tau
    upper = lo > 0
    probs = np.where(
        upper,
        special.ndtr(-lo) - special.ndtr(-hi),
        special.ndtr(hi) - special.ndtr(lo),
    )
    return np.clip(probs, 0.0, 1.0)


def category_prob(mean: float, tau: float, x: int) -> float:
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if x not in range(1, N_LEVELS + 1):
        raise DomainError(f"rating must be in 1..{N_LEVELS}, got {x}")
    return float(category_probs(np.array(mean), tau)[x - 1])


def log_lik_row(u: int, ratings: RatingMatrix, alloc: FeatureAllocation, params: ModelParams) -> float:
    if not 0 <= u < ratings.m:
        raise IndexError(f"user {u} outside [0, {ratings.m})")
    items, r = ratings.row(u)
    if items.size == 0:
        return 0.0
    means = probit_means(np.full(items.size, u), items, alloc.A, alloc.B, params.theta, params.rho, params.b0)
    return float(log_category_prob(means, params.tau, r).sum())
