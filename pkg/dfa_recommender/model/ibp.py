"""
Indian buffet process prior on the user-feature matrix.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from ..exceptions import ContractViolationError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IbpSample:
    A: np.ndarray

    @property
    def K(self) -> int:
        return int(self.A.shape[1])


def harmonic_number(m: int) -> float:
    return float(np.sum(1.0 / np.arange(1, m + 1)))


def expected_features(m: int, lam: float) -> float:
    if m < 1 or lam < 0:
        raise DomainError(f"need m >= 1 and lambda >= 0, got m={m}, lambda={lam}")
    return lam * harmonic_number(m)


def sample_prior(m: int, lam: float, rng: np.random.Generator) -> IbpSample:
    """
    Draw A row by row: user u joins feature k with probability m_{u-1,k}/u,
    then opens Poisson(lam/u) new features. Columns are indexed by appearance
    and randomly permuted at the end.
    """
    if m < 1 or lam <= 0:
        raise DomainError(f"need m >= 1 and lambda > 0, got m={m}, lambda={lam}")

    columns = []  # one int8 array of length m per feature
    counts = np.zeros(0, dtype=np.int64)
    for u in range(1, m + 1):
        if counts.size:
            joins = rng.random(counts.size) < counts / u
            for k in np.flatnonzero(joins):
                columns[k][u - 1] = 1
            counts = counts + joins
        k_new = int(rng.poisson(lam / u))
        for _ in range(k_new):
            col = np.zeros(m, dtype=np.int8)
            col[u - 1] = 1
            columns.append(col)
        counts = np.concatenate([counts, np.ones(k_new, dtype=np.int64)])

    A = np.column_stack(columns) if columns else np.zeros((m, 0), dtype=np.int8)
    A = A[:, rng.permutation(A.shape[1])]
    return IbpSample(A.astype(np.int8))


def conditional_inclusion_prob(col_count_excl: int, m: int) -> float:
    """p(A_uk = 1 | A_{-u,k}) = m_{-u,k} / m."""
    if m < 1 or not 0 <= col_count_excl <= m - 1:
        raise DomainError(f"need 0 <= m_-u,k <= m - 1, got {col_count_excl} with m={m}")
    return col_count_excl / m


def log_prior(A: np.ndarray, lam: float) -> float:
    """log p(A) for the IBP, without column order."""
    A = np.asarray(A)
    m, K = A.shape
    mk = A.sum(axis=0)
    if np.any(mk == 0):
        raise ContractViolationError("IBP prior is undefined for all-zero columns")
    H = harmonic_number(m)
    out = K * np.log(lam) - lam * H - gammaln(K + 1)
    out += np.sum(gammaln(mk) + gammaln(m - mk + 1) - gammaln(m + 1))
    return float(out)
