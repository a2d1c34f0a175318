"""
Single-chain MCMC for the double feature allocation model.

One sweep updates, in order: every row of A (Gibbs for shared features and a
reversible-jump swap of singular features), empty-column compaction, every
entry of B, the inclusion probability pB, the latent probit scores Z, the
probit scale tau, the feature effects theta and the item effects rho.

All kernels mutate the ChainState they are given and return it. A state is
owned by exactly one chain.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import special

from ..exceptions import DomainError
from . import baseline_mf
from .core import (FeatureAllocation, Hyperparams, McmcDraw, ModelParams, RatingMatrix,
                   log_category_prob, probit_means, rating_bounds)
from .ibp import sample_prior

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("prior", "mf")

SeedLike = Union[int, np.random.SeedSequence]


@dataclass(frozen=True)
class ChainConfig:
    """
    Run-length, storage and initialization settings for one chain.

    ``burn_in=None`` discards the first half of the sweeps. The ``mf_*``
    fields configure the matrix-factorization initialization.
    """

    iterations: int = 1000
    burn_in: Optional[int] = None
    thin: int = 5
    seed: SeedLike = 0
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    init: str = "prior"
    mf_k_grid: Tuple[int, ...] = (2, 4, 8)
    mf_lambda_grid: Tuple[float, ...] = (0.02, 0.1)
    mf_folds: int = 3
    mf_lr: float = 0.01
    mf_epochs: int = 30

    def __post_init__(self):
        if self.iterations < 1:
            raise DomainError(f"iterations must be positive, got {self.iterations}")
        if self.thin < 1:
            raise DomainError(f"thin must be at least 1, got {self.thin}")
        if not 0 <= self.resolved_burn_in < self.iterations:
            raise DomainError(f"burn_in must lie in [0, iterations), got {self.burn_in}")
        if self.init not in INIT_STRATEGIES:
            raise DomainError(f"unknown init strategy {self.init!r}; expected one of {INIT_STRATEGIES}")

    @property
    def resolved_burn_in(self) -> int:
        return self.iterations // 2 if self.burn_in is None else self.burn_in

    def n_stored(self) -> int:
        return (self.iterations - self.resolved_burn_in) // self.thin


@dataclass
class ChainState:
    A: np.ndarray
    B: np.ndarray
    theta: np.ndarray
    rho: np.ndarray
    tau: float
    z: np.ndarray
    pB: float
    rng: np.random.Generator
    hyper: Hyperparams
    iteration: int = 0
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return int(self.A.shape[1])

    @property
    def m(self) -> int:
        return int(self.A.shape[0])

    @property
    def n(self) -> int:
        return int(self.B.shape[0])

    @property
    def allocation(self) -> FeatureAllocation:
        return FeatureAllocation(self.A, self.B)

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.theta, self.rho, self.tau, self.hyper.b0)

    def snapshot(self) -> McmcDraw:
        return McmcDraw(self.allocation, self.params, self.iteration, self.pB)

    def means(self, ratings: RatingMatrix) -> np.ndarray:
        return probit_means(ratings.users, ratings.items, self.A, self.B, self.theta, self.rho, self.hyper.b0)


def sample_truncated_normal(mean: np.ndarray, sd: float, lo: np.ndarray, hi: np.ndarray,
                            rng: np.random.Generator) -> np.ndarray:
    """
    Inverse-CDF draws from N(mean, sd^2) restricted to (lo, hi].

    Brackets lying above the mean are reflected so the CDF is always read in
    its lower tail, and the inversion runs on log probabilities.
    """
    mean = np.asarray(mean, dtype=float)
    lo = np.broadcast_to(lo, mean.shape)
    hi = np.broadcast_to(hi, mean.shape)
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    flip = a > 0
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)

    log_pa = special.log_ndtr(a)
    log_pb = special.log_ndtr(b)
    u = rng.random(mean.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_p = log_pb + np.log(u + (1.0 - u) * np.exp(log_pa - log_pb))
    x = np.clip(special.ndtri_exp(log_p), a, b)
    x = np.where(flip, -x, x)
    z = mean + sd * x
    return np.clip(z, np.nextafter(lo, np.inf), hi)


def _row_loglik(means: np.ndarray, r: np.ndarray, tau: float) -> float:
    if r.size == 0:
        return 0.0
    return float(log_category_prob(means, tau, r).sum())


def _two_point_prob(log_w1: float, log_w0: float) -> float:
    return float(special.expit(log_w1 - log_w0))


def new_feature_rate(state: ChainState) -> float:
    basis = state.n if state.hyper.new_feature_rate == "items" else state.m
    return state.hyper.lam / basis


def rj_acceptance_prob(log_lik_proposal: float, log_lik_current: float) -> float:
    """Metropolis acceptance of a singular-feature swap proposed from the prior."""
    return math.exp(min(0.0, log_lik_proposal - log_lik_current))


def update_row_A(state: ChainState, u: int, ratings: RatingMatrix) -> ChainState:
    """
    Update row u of A.

    Shared features (m_{-u,k} > 0) are Gibbs-sampled against the row
    likelihood. Singular features are then swapped as a block for
    Poisson-many fresh ones drawn from their priors, accepted with the row
    likelihood ratio.
    """
    hyper, rng = state.hyper, state.rng
    items, r = ratings.row(u)
    m = state.m
    a_u = state.A[u].astype(float)
    B_u = state.B[items].astype(float)
    base = hyper.b0 + state.rho[items]
    means = base + B_u @ (a_u * state.theta)
    others = state.A.sum(axis=0) - state.A[u]

    for k in np.flatnonzero(others > 0):
        p1 = others[k] / m
        contrib = state.theta[k] * B_u[:, k]
        without = means - a_u[k] * contrib
        with_k = without + contrib
        log_w1 = math.log(p1) + _row_loglik(with_k, r, state.tau)
        log_w0 = math.log1p(-p1) + _row_loglik(without, r, state.tau)
        a_u[k] = float(rng.random() < _two_point_prob(log_w1, log_w0))
        means = with_k if a_u[k] else without
    state.A[u] = a_u.astype(np.int8)

    keep = others > 0
    k_new = int(rng.poisson(new_feature_rate(state)))
    theta_new = rng.normal(0.0, hyper.sigma0_theta, k_new)
    B_new = (rng.random((state.n, k_new)) < state.pB).astype(np.int8)

    proposal = base + B_u[:, keep] @ (a_u[keep] * state.theta[keep]) + B_new[items] @ theta_new
    alpha = rj_acceptance_prob(_row_loglik(proposal, r, state.tau), _row_loglik(means, r, state.tau))
    accept = rng.random() < alpha

    state.diagnostics["rj_proposed"] = state.diagnostics.get("rj_proposed", 0) + 1
    if accept:
        state.diagnostics["rj_accepted"] = state.diagnostics.get("rj_accepted", 0) + 1
        if k_new or not keep.all():
            A_new = np.zeros((m, k_new), dtype=np.int8)
            A_new[u] = 1
            state.A = np.hstack([state.A[:, keep], A_new])
            state.B = np.hstack([state.B[:, keep], B_new])
            state.theta = np.concatenate([state.theta[keep], theta_new])
    return state


def compact(state: ChainState) -> ChainState:
    """Drop features no user belongs to, together with their B columns and effects."""
    keep = state.A.sum(axis=0) > 0
    if not keep.all():
        state.A = state.A[:, keep]
        state.B = state.B[:, keep]
        state.theta = state.theta[keep]
    return state


def _column_means(state: ChainState, i: int, users: np.ndarray) -> np.ndarray:
    shared = state.A[users].astype(float) * state.B[i]
    return state.hyper.b0 + state.rho[i] + shared @ state.theta


def _b_weights(state: ChainState, i: int, k: int, users: np.ndarray, r: np.ndarray,
               means: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    contrib = state.theta[k] * state.A[users, k]
    without = means - state.B[i, k] * contrib
    with_k = without + contrib
    log_w1 = math.log(state.pB) + _row_loglik(with_k, r, state.tau)
    log_w0 = math.log1p(-state.pB) + _row_loglik(without, r, state.tau)
    return _two_point_prob(log_w1, log_w0), with_k, without


def b_inclusion_prob(state: ChainState, i: int, k: int, ratings: RatingMatrix) -> float:
    """Full-conditional probability that B_ik = 1."""
    users, r = ratings.col(i)
    prob, _, _ = _b_weights(state, i, k, users, r, _column_means(state, i, users))
    return prob


def _resample_b(state: ChainState, i: int, k: int, users: np.ndarray, r: np.ndarray,
                means: np.ndarray) -> np.ndarray:
    prob, with_k, without = _b_weights(state, i, k, users, r, means)
    state.B[i, k] = int(state.rng.random() < prob)
    return with_k if state.B[i, k] else without


def update_B_entry(state: ChainState, i: int, k: int, ratings: RatingMatrix) -> ChainState:
    if not (0 <= i < state.n and 0 <= k < state.K):
        raise IndexError(f"B entry ({i}, {k}) outside {state.n}x{state.K}")
    users, r = ratings.col(i)
    _resample_b(state, i, k, users, r, _column_means(state, i, users))
    return state


def update_B(state: ChainState, ratings: RatingMatrix) -> ChainState:
    for i in range(state.n):
        users, r = ratings.col(i)
        means = _column_means(state, i, users)
        for k in range(state.K):
            means = _resample_b(state, i, k, users, r, means)
    return state


def pB_posterior(state: ChainState) -> Tuple[float, float]:
    a_p, b_p = state.hyper.pB_prior
    ones = int(state.B.sum())
    return a_p + ones, b_p + state.B.size - ones


def update_pB(state: ChainState) -> ChainState:
    if state.hyper.pB_prior is None:
        return state
    a_post, b_post = pB_posterior(state)
    # keep pB strictly inside (0, 1) so the log weights stay finite
    state.pB = float(np.clip(state.rng.beta(a_post, b_post), 1e-12, 1 - 1e-12))
    return state


def sample_Z(state: ChainState, ratings: RatingMatrix) -> ChainState:
    lo, hi = rating_bounds(ratings.ratings)
    state.z = sample_truncated_normal(state.means(ratings), state.tau, lo, hi, state.rng)
    return state


def tau_posterior(state: ChainState, ratings: RatingMatrix) -> Tuple[float, float]:
    """Shape and scale of the inverse-gamma full conditional of tau^2."""
    shape, scale = state.hyper.tau_prior
    resid = state.z - state.means(ratings)
    return shape + ratings.n_obs / 2.0, scale + 0.5 * float(resid @ resid)


def update_tau(state: ChainState, ratings: RatingMatrix) -> ChainState:
    shape, scale = tau_posterior(state, ratings)
    state.tau = math.sqrt(scale / state.rng.gamma(shape))
    return state


def normal_posterior(resid_sum: np.ndarray, count: np.ndarray, tau: float, mu0: float,
                     sigma0: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conjugate update of a location shared by ``count`` residuals with noise sd ``tau``.

    ``sigma0 = inf`` is a flat prior; the precision is then zero wherever
    ``count`` is zero.
    """
    prior_prec = 0.0 if math.isinf(sigma0) else 1.0 / sigma0 ** 2
    prec = prior_prec + np.asarray(count, dtype=float) / tau ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = (prior_prec * mu0 + np.asarray(resid_sum, dtype=float) / tau ** 2) / prec
    return mean, prec


def _shared_matrix(state: ChainState, ratings: RatingMatrix) -> np.ndarray:
    return state.A[ratings.users].astype(float) * state.B[ratings.items]


def update_theta(state: ChainState, ratings: RatingMatrix) -> ChainState:
    if state.K == 0:
        return state
    shared = _shared_matrix(state, ratings)
    means = state.hyper.b0 + state.rho[ratings.items] + shared @ state.theta
    for k in range(state.K):
        linked = shared[:, k] > 0
        resid = state.z[linked] - means[linked] + state.theta[k]
        mean, prec = normal_posterior(resid.sum(), linked.sum(), state.tau, 0.0, state.hyper.sigma0_theta)
        new = state.rng.normal(mean, 1.0 / math.sqrt(prec))
        means[linked] += new - state.theta[k]
        state.theta[k] = new
    return state


def update_rho(state: ChainState, ratings: RatingMatrix) -> ChainState:
    mu0, sigma0 = state.hyper.rho_prior
    shared = _shared_matrix(state, ratings) @ state.theta if state.K else 0.0
    resid = state.z - state.hyper.b0 - shared
    sums = np.bincount(ratings.items, weights=resid, minlength=state.n)
    counts = np.bincount(ratings.items, minlength=state.n)
    mean, prec = normal_posterior(sums, counts, state.tau, mu0, sigma0)
    noise = state.rng.standard_normal(state.n)
    informed = prec > 0
    state.rho = np.where(informed, mean + noise / np.sqrt(np.where(informed, prec, 1.0)), state.rho)
    unobserved = int((~informed).sum())
    state.diagnostics["rho_unobserved"] = unobserved
    if unobserved and state.iteration == 0:
        logger.warning(f"{unobserved} items have no observations under a flat rho prior; their rho is held fixed")
    return state


def sweep(state: ChainState, ratings: RatingMatrix) -> ChainState:
    for u in range(state.m):
        update_row_A(state, u, ratings)
    compact(state)
    update_B(state, ratings)
    update_pB(state)
    sample_Z(state, ratings)
    update_tau(state, ratings)
    update_theta(state, ratings)
    update_rho(state, ratings)
    state.iteration += 1
    state.diagnostics["K"] = state.K
    return state


def _mf_allocation(ratings: RatingMatrix, config: ChainConfig,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Binarize cross-validated MF factors at their per-factor median magnitude."""
    k, lam_p, lam_q = baseline_mf.cv_select_rank(
        ratings, config.mf_k_grid, config.mf_lambda_grid, config.mf_folds, rng,
        config.mf_lr, config.mf_epochs,
    )
    model = baseline_mf.train_mf(ratings, k, lam_p, lam_q, config.mf_lr, config.mf_epochs, rng)
    P, Q = np.abs(model.P), np.abs(model.Q)
    A = (P > np.median(P, axis=1, keepdims=True)).T.astype(np.int8)
    B = (Q > np.median(Q, axis=1, keepdims=True)).T.astype(np.int8)
    return A, B


def init_state(ratings: RatingMatrix, config: ChainConfig) -> ChainState:
    hyper = config.hyperparams
    rng = np.random.default_rng(config.seed)
    if ratings.m < 1 or ratings.n < 1:
        raise DomainError(f"cannot initialize a chain on a {ratings.m}x{ratings.n} matrix")

    if config.init == "mf":
        A, B = _mf_allocation(ratings, config, rng)
    else:
        A = sample_prior(ratings.m, hyper.lam, rng).A
        B = (rng.random((ratings.n, A.shape[1])) < hyper.pB).astype(np.int8)

    shape, scale = hyper.tau_prior
    tau = math.sqrt(scale / (shape - 1)) if shape > 1 else 1.0
    mu0 = hyper.rho_prior[0]
    state = ChainState(
        A=A, B=B,
        theta=rng.normal(0.0, hyper.sigma0_theta, A.shape[1]),
        rho=np.full(ratings.n, mu0, dtype=float),
        tau=tau,
        z=np.empty(0),
        pB=hyper.pB,
        rng=rng,
        hyper=hyper,
    )
    compact(state)
    sample_Z(state, ratings)
    logger.info(f"Initialized chain ({config.init}) on {ratings.m}x{ratings.n} with K={state.K}")
    return state


def run_chain(ratings: RatingMatrix, config: ChainConfig,
              callback: Optional[Callable[[ChainState], None]] = None) -> List[McmcDraw]:
    """
    Run ``config.iterations`` sweeps and store every ``thin``-th state after burn-in.

    Args:
        ratings: Observed training ratings
        config: Chain settings
        callback: Called with the state after every sweep

    Returns:
        Stored draws in iteration order
    """
    if ratings.n_obs == 0:
        raise DomainError("cannot run a chain on a rating matrix with no observations")

    state = init_state(ratings, config)
    burn_in = config.resolved_burn_in
    draws = []
    for t in range(1, config.iterations + 1):
        sweep(state, ratings)
        if t > burn_in and (t - burn_in) % config.thin == 0:
            draws.append(state.snapshot())
        if callback is not None:
            callback(state)
        if t % 100 == 0:
            logger.debug(f"sweep {t}: K={state.K} tau={state.tau:.4f} pB={state.pB:.4f}")

    accepted = state.diagnostics.get("rj_accepted", 0)
    proposed = max(state.diagnostics.get("rj_proposed", 0), 1)
    logger.info(
        f"Chain finished {config.iterations} sweeps: stored {len(draws)} draws, "
        f"final K={state.K}, RJ acceptance {accepted / proposed:.3f}"
    )
    return draws
