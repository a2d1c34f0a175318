"""
Consensus Monte Carlo over user shards with shared item effects.

Users are split into shards that each keep the full item set. Every shard
runs its own chain; only the item effects rho are treated as global. Their
shard posteriors are summarized by per-item mean and sd, merged by precision
weighting, and the merged posterior is resampled to re-weight each shard's
stored draws for prediction. Feature structure (A, B, theta) stays local to
its shard.
"""
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from ..exceptions import DegeneratePrecisionError, DomainError
from .core import McmcDraw, RatingMatrix
from .sampler import ChainConfig, run_chain

logger = logging.getLogger(__name__)

SPLIT_STRATEGIES = ("round_robin", "contiguous", "seeded_shuffle")
RESAMPLE_MODES = ("per_iteration", "per_shard")


@dataclass(frozen=True)
class ShardPlan:
    """Partition of users into shards; ``shards[s]`` lists the global user ids of shard s in order."""

    m: int
    shards: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        flat = [u for shard in self.shards for u in shard]
        if sorted(flat) != list(range(self.m)):
            raise DomainError("shards must partition the users")
        if any(len(shard) == 0 for shard in self.shards):
            raise DomainError("every shard must be non-empty")

    @property
    def S(self) -> int:
        return len(self.shards)

    @property
    def assignment(self) -> np.ndarray:
        """Shard id of every user."""
        out = np.empty(self.m, dtype=np.int64)
        for s, shard in enumerate(self.shards):
            out[list(shard)] = s
        return out

    def local_index(self) -> np.ndarray:
        """Position of every user inside its shard."""
        out = np.empty(self.m, dtype=np.int64)
        for shard in self.shards:
            out[list(shard)] = np.arange(len(shard))
        return out


@dataclass(frozen=True)
class ShardMoments:
    """Per-item posterior mean and sd of rho in one shard; ``observed=None`` means every item was rated."""

    shard: int
    mean: np.ndarray
    sd: np.ndarray
    observed: Optional[np.ndarray] = None

    def observed_mask(self) -> np.ndarray:
        if self.observed is None:
            return np.ones(self.mean.size, dtype=bool)
        return np.asarray(self.observed, dtype=bool)


@dataclass(frozen=True)
class GlobalRho:
    mean: np.ndarray
    sd: np.ndarray


@dataclass(frozen=True)
class FilterRule:
    """
    Draw selection around a resampled rho.

    Exactly one of ``epsilon`` (keep draws whose mean absolute deviation
    from rho-tilde is below it) and ``keep_fraction`` (keep the closest
    fraction of draws) is set.
    """

    epsilon: Optional[float] = None
    keep_fraction: Optional[float] = 0.2

    def __post_init__(self):
        if (self.epsilon is None) == (self.keep_fraction is None):
            raise DomainError("set exactly one of epsilon and keep_fraction")
        if self.epsilon is not None and not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.keep_fraction is not None and not 0 < self.keep_fraction <= 1:
            raise DomainError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")

    def describe(self) -> dict:
        if self.epsilon is not None:
            return {"mode": "epsilon", "epsilon": self.epsilon, "distance": "mean_absolute_deviation"}
        return {"mode": "keep_fraction", "keep_fraction": self.keep_fraction, "distance": "mean_absolute_deviation"}


@dataclass(frozen=True)
class CmcConfig:
    S: int = 1
    chain: ChainConfig = field(default_factory=ChainConfig)
    rule: FilterRule = field(default_factory=FilterRule)
    rho_prior: Tuple[float, float] = (0.0, math.inf)
    strategy: str = "round_robin"
    resample_mode: str = "per_iteration"
    master_seed: int = 0

    def __post_init__(self):
        if self.S < 1:
            raise DomainError(f"need at least one shard, got {self.S}")
        if self.strategy not in SPLIT_STRATEGIES:
            raise DomainError(f"unknown split strategy {self.strategy!r}")
        if self.resample_mode not in RESAMPLE_MODES:
            raise DomainError(f"unknown resample mode {self.resample_mode!r}")


class FilterResult(NamedTuple):
    draws: List[McmcDraw]
    fallback: bool


def derive_seed(master_seed: int, tag: str, shard: int = 0, purpose: int = 0) -> np.random.SeedSequence:
    """Independent stream per (command tag, shard, purpose); new shards never disturb old ones."""
    return np.random.SeedSequence(master_seed, spawn_key=(zlib.crc32(tag.encode()), shard, purpose))


def split_users(m: int, S: int, strategy: str = "round_robin", seed: int = 0) -> ShardPlan:
    if not 1 <= S <= m:
        raise DomainError(f"need 1 <= S <= m, got S={S}, m={m}")
    if strategy == "round_robin":
        shards = [list(range(s, m, S)) for s in range(S)]
    elif strategy == "contiguous":
        shards = [chunk.tolist() for chunk in np.array_split(np.arange(m), S)]
    elif strategy == "seeded_shuffle":
        order = np.random.default_rng(derive_seed(seed, "split")).permutation(m)
        shards = [sorted(chunk.tolist()) for chunk in np.array_split(order, S)]
    else:
        raise DomainError(f"unknown split strategy {strategy!r}")
    return ShardPlan(m, tuple(tuple(shard) for shard in shards))


def restrict_users(ratings: RatingMatrix, users: Sequence[int]) -> RatingMatrix:
    """Ratings of the given users, re-indexed 0..len(users)-1 in the given order, all items kept."""
    users = np.asarray(users, dtype=np.int64)
    local = np.full(ratings.m, -1, dtype=np.int64)
    local[users] = np.arange(users.size)
    mask = local[ratings.users] >= 0
    return RatingMatrix(users.size, ratings.n, local[ratings.users[mask]], ratings.items[mask],
                        ratings.ratings[mask])


def shard_chain_config(cfg: CmcConfig, shard: int) -> ChainConfig:
    return replace(cfg.chain, seed=derive_seed(cfg.master_seed, "chain", shard))


def _run_shard(ratings: RatingMatrix, config: ChainConfig, shard: int) -> List[McmcDraw]:
    logger.info(f"Shard {shard}: {ratings.m} users, {ratings.n_obs} ratings")
    return run_chain(ratings, config)


def run_shards(ratings: RatingMatrix, plan: ShardPlan, cfg: CmcConfig,
               jobs: int = 1) -> List[List[McmcDraw]]:
    """
    Run one independent chain per shard, in parallel when ``jobs > 1``.

    Every shard draws from its own derived seed, so the output does not
    depend on ``jobs`` or on execution order.
    """
    if plan.m != ratings.m:
        raise DomainError(f"plan covers {plan.m} users, ratings have {ratings.m}")
    subsets = [restrict_users(ratings, users) for users in plan.shards]
    for s, sub in enumerate(subsets):
        if sub.n_obs == 0:
            raise DomainError(f"shard {s} has no observed ratings")

    tasks = (delayed(_run_shard)(sub, shard_chain_config(cfg, s), s) for s, sub in enumerate(subsets))
    try:
        results = Parallel(n_jobs=jobs, prefer="processes")(tasks)
    except Exception as e:
        logger.error(f"Shard execution failed: {str(e)}")
        raise
    logger.info(f"Finished {plan.S} shards")
    return list(results)


def shard_moments(draws: Sequence[McmcDraw], shard: int = 0,
                  ratings: Optional[RatingMatrix] = None) -> ShardMoments:
    """
    Summarize a shard's rho draws. Passing the shard's ``ratings`` marks the
    items none of its users rated, so merging can ignore them.
    """
    if not draws:
        raise DomainError("cannot summarize an empty draw list")
    rho = np.stack([draw.params.rho for draw in draws])
    sd = rho.std(axis=0, ddof=1) if len(draws) > 1 else np.zeros(rho.shape[1])
    observed = None
    if ratings is not None:
        if ratings.n != rho.shape[1]:
            raise DomainError(f"draws cover {rho.shape[1]} items, ratings have {ratings.n}")
        observed = ratings.item_counts() > 0
    return ShardMoments(shard, rho.mean(axis=0), sd, observed)


def merge_rho(moments: Sequence[ShardMoments], prior: Tuple[float, float] = (0.0, math.inf)) -> GlobalRho:
    """
    Precision-weighted merge: 1/sd^2 = 1/sd0^2 + sum_s 1/sd_s^2 and
    mean = (mu0/sd0^2 + sum_s mu_s/sd_s^2) * sd^2. A flat prior (sd0 = inf)
    drops the prior terms.

    A shard in which nobody rated item i carries no information on rho_i and
    gets zero precision for it. An item unrated in every shard falls back to
    the prior, or under a flat prior keeps its held value with sd 0.
    """
    if not moments:
        raise DomainError("need at least one shard to merge")
    n = moments[0].mean.size
    if any(mo.mean.size != n or mo.sd.size != n or mo.observed_mask().size != n for mo in moments):
        raise DomainError("shard moments must all cover the same items")
    mu0, sd0 = prior
    means = np.stack([mo.mean for mo in moments])
    sds = np.stack([mo.sd for mo in moments])
    observed = np.stack([mo.observed_mask() for mo in moments])

    if len(moments) == 1 and math.isinf(sd0):
        return GlobalRho(means[0].copy(), sds[0].copy())

    degenerate = (sds == 0) & observed
    if degenerate.any() and len(moments) > 1:
        item = int(np.flatnonzero(degenerate.any(axis=0))[0])
        raise DegeneratePrecisionError(
            f"item {item} is rated in a shard whose posterior sd is zero; store more draws per shard"
        )

    prior_prec = 0.0 if math.isinf(sd0) else 1.0 / sd0 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        shard_prec = np.where(observed, 1.0 / sds ** 2, 0.0)
        weighted = np.where(observed, shard_prec * means, 0.0)
        prec = prior_prec + shard_prec.sum(axis=0)
        mean = (prior_prec * mu0 + weighted.sum(axis=0)) / prec
        sd = 1.0 / np.sqrt(prec)
    if degenerate.any():
        pinned = degenerate[0]
        mean = np.where(pinned, means[0], mean)
        sd = np.where(pinned, 0.0, sd)

    blind = prec == 0
    if blind.any():
        logger.warning(f"{int(blind.sum())} items are unrated in every shard; keeping their held rho")
        mean = np.where(blind, means[0], mean)
        sd = np.where(blind, 0.0, sd)
    return GlobalRho(mean, sd)


def resample_rho(global_rho: GlobalRho, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(global_rho.mean, global_rho.sd)


def _distances(draws: Sequence[McmcDraw], rho_tilde: np.ndarray) -> np.ndarray:
    rho = np.stack([draw.params.rho for draw in draws])
    if rho.shape[1] != np.size(rho_tilde):
        raise DomainError("rho-tilde length does not match the draws")
    return np.abs(rho - rho_tilde).mean(axis=-1)


def _select(distances: np.ndarray, rule: FilterRule) -> Tuple[np.ndarray, bool]:
    if rule.keep_fraction is not None:
        count = max(1, int(round(rule.keep_fraction * distances.size)))
        return np.sort(np.argsort(distances, kind="stable")[:count]), False
    kept = np.flatnonzero(distances < rule.epsilon)
    if kept.size:
        return kept, False
    return np.array([int(np.argmin(distances))]), True


def filter_draws(draws: Sequence[McmcDraw], rho_tilde: np.ndarray, rule: FilterRule) -> FilterResult:
    """
    Draws whose stored rho lies close to ``rho_tilde``; never empty.

    When no draw passes the epsilon threshold the single closest draw is
    returned and ``fallback`` is set.
    """
    if not draws:
        raise DomainError("cannot filter an empty draw list")
    idx, fallback = _select(_distances(draws, rho_tilde), rule)
    if fallback:
        logger.warning(f"No draw within epsilon={rule.epsilon}; keeping the closest draw")
    return FilterResult([draws[j] for j in idx], fallback)


def merged_predict(shard_draws: Sequence[Sequence[McmcDraw]], global_rho: GlobalRho, rule: FilterRule,
                   rng: np.random.Generator, mode: str = "per_iteration") -> List[List[McmcDraw]]:
    """
    Prediction ensembles per shard with rho replaced by draws from the merged posterior.

    ``per_iteration`` pairs every stored draw with its own rho-tilde and keeps
    the pairs that are close; ``per_shard`` draws one rho-tilde per shard and
    filters the shard's draws against it.
    """
    if mode not in RESAMPLE_MODES:
        raise DomainError(f"unknown resample mode {mode!r}")
    ensembles = []
    for s, draws in enumerate(shard_draws):
        if not draws:
            raise DomainError(f"shard {s} stored no draws")
        if mode == "per_shard":
            rho_tilde = resample_rho(global_rho, rng)
            kept, _ = filter_draws(draws, rho_tilde, rule)
            ensemble = [draw.with_rho(rho_tilde) for draw in kept]
        else:
            tildes = np.stack([resample_rho(global_rho, rng) for _ in draws])
            rho = np.stack([draw.params.rho for draw in draws])
            idx, fallback = _select(np.abs(rho - tildes).mean(axis=1), rule)
            if fallback:
                logger.warning(f"Shard {s}: no draw within epsilon={rule.epsilon}; keeping the closest pair")
            ensemble = [draws[j].with_rho(tildes[j]) for j in idx]
        logger.info(f"Shard {s}: kept {len(ensemble)} of {len(draws)} draws for merged prediction")
        ensembles.append(ensemble)
    return ensembles
