"""
Posterior structure summaries and the shard-count tradeoff table.

Feature labels are not identified across draws, so allocations are compared
after matching columns. The default matcher is greedy: it repeatedly pairs
the two unmatched columns with the smallest Hamming distance.
"""
import itertools
import logging
from collections import Counter
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

from ..exceptions import DomainError
from ..model.core import McmcDraw

logger = logging.getLogger(__name__)

EXHAUSTIVE_MAX_K = 6


@dataclass(frozen=True)
class TradeoffRow:
    S: int
    per_shard_cost: float
    total_cost: float
    se_theta: float


def _check_same_shape(A: np.ndarray, A2: np.ndarray):
    if A.shape != A2.shape:
        raise DomainError(f"cannot compare allocations of shapes {A.shape} and {A2.shape}")


def column_distances(A: np.ndarray, A2: np.ndarray) -> np.ndarray:
    """Hamming distance between every column of ``A`` and every column of ``A2``."""
    X = np.asarray(A, dtype=np.int64)
    Y = np.asarray(A2, dtype=np.int64)
    return X.T @ (1 - Y) + (1 - X).T @ Y


def greedy_column_matching(A: np.ndarray, A2: np.ndarray) -> Tuple[np.ndarray, int]:
    """
    Greedy column alignment of ``A2`` to ``A``.

    Returns:
        ``perm`` with ``A2[:, perm]`` aligned to ``A``, and the summed distance
    """
    _check_same_shape(A, A2)
    D = column_distances(A, A2).astype(float)
    K = D.shape[0]
    perm = np.empty(K, dtype=np.int64)
    total = 0
    for _ in range(K):
        j, l = np.unravel_index(np.argmin(D), D.shape)
        perm[j] = l
        total += int(D[j, l])
        D[j, :] = np.inf
        D[:, l] = np.inf
    return perm, total


def min_hamming_distance(A: np.ndarray, A2: np.ndarray) -> int:
    return greedy_column_matching(A, A2)[1]


def pad_columns(A: np.ndarray, K: int) -> np.ndarray:
    """Append all-zero columns up to ``K`` so allocations with different K can be compared."""
    A = np.asarray(A)
    if A.shape[1] > K:
        raise DomainError(f"allocation already has {A.shape[1]} > {K} columns")
    return np.hstack([A, np.zeros((A.shape[0], K - A.shape[1]), dtype=A.dtype)])


def exhaustive_min_hamming(A: np.ndarray, A2: np.ndarray) -> int:
    """Exact minimum over all column permutations; only for K <= 6."""
    _check_same_shape(A, A2)
    D = column_distances(A, A2)
    K = D.shape[0]
    if K > EXHAUSTIVE_MAX_K:
        raise DomainError(f"exhaustive matching is limited to K <= {EXHAUSTIVE_MAX_K}")
    if K == 0:
        return 0
    return int(min(D[np.arange(K), list(p)].sum() for p in itertools.permutations(range(K))))


def map_K(draws: Sequence[McmcDraw]) -> int:
    """Posterior mode of the feature count; ties go to the smaller K."""
    if not draws:
        raise DomainError("cannot summarize an empty draw list")
    counts = Counter(draw.K for draw in draws)
    top = max(counts.values())
    return min(k for k, c in counts.items() if c == top)


def k_trace(draws: Sequence[McmcDraw]) -> pd.DataFrame:
    return pd.DataFrame({"iteration": [d.iteration for d in draws], "K": [d.K for d in draws]})


def dahl_draw(draws: Sequence[McmcDraw]) -> McmcDraw:
    """
    The draw with K equal to the MAP feature count whose mean greedy Hamming
    distance to the other such draws is smallest (earliest iteration on ties).
    """
    if not draws:
        raise DomainError("cannot summarize an empty draw list")
    k_hat = map_K(draws)
    candidates = sorted((d for d in draws if d.K == k_hat), key=lambda d: d.iteration)
    T = len(candidates)
    if T == 1:
        return candidates[0]
    dist = np.zeros((T, T))
    for a, b in itertools.combinations(range(T), 2):
        dist[a, b] = dist[b, a] = min_hamming_distance(candidates[a].allocation.A, candidates[b].allocation.A)
    mean_dist = dist.sum(axis=1) / (T - 1)
    best = int(np.argmin(mean_dist))
    logger.info(f"Dahl estimate: iteration {candidates[best].iteration}, K={k_hat}, "
                f"mean distance {mean_dist[best]:.2f} over {T} draws")
    return candidates[best]


def dahl_estimate_A(draws: Sequence[McmcDraw]) -> np.ndarray:
    return np.array(dahl_draw(draws).allocation.A)


def conditional_estimates(draws: Sequence[McmcDraw], A_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Majority-vote B and mean theta over draws with K = K-hat, aligned to ``A_hat``.
    """
    A_hat = np.asarray(A_hat)
    k_hat = A_hat.shape[1]
    aligned_B, aligned_theta = [], []
    for draw in draws:
        if draw.K != k_hat or draw.allocation.A.shape != A_hat.shape:
            continue
        perm, _ = greedy_column_matching(A_hat, draw.allocation.A)
        aligned_B.append(draw.allocation.B[:, perm])
        aligned_theta.append(draw.params.theta[perm])
    if not aligned_B:
        raise DomainError(f"no draw has K={k_hat}")
    B_hat = (np.mean(aligned_B, axis=0) > 0.5).astype(np.int8)
    return B_hat, np.mean(aligned_theta, axis=0)


def tradeoff_table(m: float, n: float, S_values: Sequence[int]) -> List[TradeoffRow]:
    """
    Relative per-iteration cost (m/S)^3, total cost S (m/S)^3 and relative
    standard error ((m_s n) / log(m_s n))^(-1/2) for each shard count.
    """
    if m < 2 or n < 2:
        raise DomainError(f"need m, n >= 2, got m={m}, n={n}")
    rows = []
    for S in S_values:
        if S < 1:
            raise DomainError(f"shard count must be positive, got {S}")
        ms = m / S
        cells = ms * n
        if cells <= 1:
            raise DomainError(f"m_s * n = {cells} must exceed 1")
        cost = ms ** 3
        rows.append(TradeoffRow(int(S), cost, S * cost, float(np.sqrt(np.log(cells) / cells))))
    return rows


def tradeoff_frame(rows: Sequence[TradeoffRow]) -> pd.DataFrame:
    return pd.DataFrame([r.__dict__ for r in rows], columns=["S", "per_shard_cost", "total_cost", "se_theta"])
