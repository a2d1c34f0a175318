"""
Experiment configuration.

Values are resolved from, in increasing priority: the dataclass defaults, a
flat ``key=value`` file, the ``DFA_SEED`` environment variable (seed only)
and explicit command-line flags. Keys in the file are case-insensitive and
match the field names below.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

from .exceptions import DomainError
from .model.consensus import CmcConfig, FilterRule, derive_seed
from .data.simulate import HoldoutMode
from .model.core import BASELINE, Hyperparams
from .model.sampler import ChainConfig

logger = logging.getLogger(__name__)

SEED_ENV = "DFA_SEED"


def _optional(parse):
    def parser(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return parser


def _bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tuple_of(parse):
    def parser(text: str):
        return tuple(parse(v) for v in text.split(",") if v.strip())
    return parser


def _pair(text: str) -> Tuple[float, float]:
    values = tuple(float(v) for v in text.split(","))
    if len(values) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {text!r}")
    return values


def _opt(default, parse, help_text: str = ""):
    return field(default=default, metadata={"parse": parse, "help": help_text})


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable setting of the command-line workflows."""

    seed: int = _opt(0, int, "master seed")

    # data
    data_format: str = _opt("csv", str, "csv or sql")
    query: Optional[str] = _opt(None, _optional(str), "SQL query for data_format=sql")
    top_items: Optional[int] = _opt(None, _optional(int), "keep the N most rated items")
    min_user_ratings: Optional[int] = _opt(None, _optional(int), "keep users with at least N ratings")
    holdout: Optional[str] = _opt(None, _optional(str), "test fraction or per_user_one_test")

    # chain
    iterations: int = _opt(1000, int)
    burn_in: Optional[int] = _opt(None, _optional(int), "defaults to half the iterations")
    thin: int = _opt(5, int)
    init: str = _opt("prior", str, "prior or mf")

    # priors
    lam: float = _opt(3.0, float)
    pB: float = _opt(0.1, float)
    pB_prior: Optional[Tuple[float, float]] = _opt((1.0, 9.0), _optional(_pair), "a,b of the Beta hyperprior; none fixes pB")
    sigma0_theta: float = _opt(2.0, float)
    tau_prior: Tuple[float, float] = _opt((5.0, 1.0), _pair, "a,b of the inverse-gamma prior on tau^2")
    rho_mu0: float = _opt(0.0, float)
    rho_sigma0: float = _opt(math.inf, float, "inf for a flat prior")
    b0: float = _opt(BASELINE, float)
    new_feature_rate: str = _opt("items", str, "items (lambda/n) or users (lambda/m)")

    # consensus
    shards: int = _opt(1, int)
    jobs: int = _opt(1, int)
    split: str = _opt("round_robin", str, "round_robin, contiguous or seeded_shuffle")
    keep_fraction: Optional[float] = _opt(0.2, _optional(float))
    epsilon: Optional[float] = _opt(None, _optional(float))
    resample_mode: str = _opt("per_iteration", str, "per_iteration or per_shard")

    # matrix factorization
    mf_k_grid: Tuple[int, ...] = _opt((2, 4, 8), _tuple_of(int))
    mf_lambda_grid: Tuple[float, ...] = _opt((0.02, 0.1), _tuple_of(float))
    mf_folds: int = _opt(3, int)
    mf_lr: float = _opt(0.01, float)
    mf_epochs: int = _opt(30, int)

    # simulation
    sim_m: int = _opt(100, int)
    sim_n: int = _opt(150, int)
    sim_lam: float = _opt(3.0, float)
    sim_pB: float = _opt(0.2, float)
    sim_theta_sd: float = _opt(2.0, float)
    sim_tau: float = _opt(0.25, float)
    sim_include_rho: bool = _opt(False, _bool)
    sim_holdout: str = _opt("0.2", str, "test fraction or per_user_one_test")

    @classmethod
    def field_names(cls) -> Dict[str, str]:
        return {f.name.lower(): f.name for f in fields(cls)}

    @classmethod
    def parse_value(cls, name: str, text: str) -> Any:
        spec = {f.name: f for f in fields(cls)}[name]
        try:
            return spec.metadata["parse"](text)
        except ValueError as e:
            raise DomainError(f"invalid value for {name}: {e}")

    @classmethod
    def from_file(cls, path: str) -> Dict[str, Any]:
        """Parse a ``key=value`` file into typed overrides."""
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        names = cls.field_names()
        overrides = {}
        for key, text in dotenv_values(path).items():
            name = names.get(key.lower())
            if name is None:
                raise DomainError(f"unknown config key {key!r} in {path}")
            overrides[name] = cls.parse_value(name, text if text is not None else "")
        logger.info(f"Loaded {len(overrides)} settings from {path}")
        return overrides

    @classmethod
    def resolve(cls, config_path: Optional[str] = None, flags: Optional[Mapping[str, Any]] = None,
                environ: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        """
        Build the effective configuration

        Args:
            config_path: Optional ``key=value`` file
            flags: Values of the flags that were given; keys that are not config fields are ignored
            environ: Environment to read ``DFA_SEED`` from (defaults to ``os.environ``)

        Returns:
            Resolved ExperimentConfig
        """
        environ = os.environ if environ is None else environ
        values: Dict[str, Any] = {}
        if config_path:
            values.update(cls.from_file(config_path))
        if environ.get(SEED_ENV):
            values["seed"] = cls.parse_value("seed", environ[SEED_ENV])
        valid = {f.name for f in fields(cls)}
        for name, value in (flags or {}).items():
            if name in valid:
                values[name] = value
        config = replace(cls(), **values)
        config.validate()
        return config

    def validate(self) -> None:
        """Build the downstream settings once so bad values fail before any work starts."""
        self.hyperparams()
        self.filter_rule()
        HoldoutMode.parse(self.sim_holdout)
        if self.holdout is not None:
            HoldoutMode.parse(self.holdout)
        if self.shards < 1 or self.jobs < 1:
            raise DomainError("shards and jobs must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            lam=self.lam, pB=self.pB, pB_prior=self.pB_prior, sigma0_theta=self.sigma0_theta,
            tau_prior=self.tau_prior, rho_prior=(self.rho_mu0, self.rho_sigma0), b0=self.b0,
            new_feature_rate=self.new_feature_rate,
        )

    def filter_rule(self) -> FilterRule:
        if self.epsilon is not None:
            return FilterRule(epsilon=self.epsilon, keep_fraction=None)
        return FilterRule(keep_fraction=self.keep_fraction)

    def chain_config(self, tag: str = "chain") -> ChainConfig:
        return ChainConfig(
            iterations=self.iterations, burn_in=self.burn_in, thin=self.thin,
            seed=self.seed_for(tag), hyperparams=self.hyperparams(), init=self.init,
            mf_k_grid=self.mf_k_grid, mf_lambda_grid=self.mf_lambda_grid, mf_folds=self.mf_folds,
            mf_lr=self.mf_lr, mf_epochs=self.mf_epochs,
        )

    def cmc_config(self) -> CmcConfig:
        return CmcConfig(
            S=self.shards, chain=self.chain_config(), rule=self.filter_rule(),
            rho_prior=(self.rho_mu0, self.rho_sigma0), strategy=self.split,
            resample_mode=self.resample_mode, master_seed=self.seed,
        )

    def seed_for(self, tag: str, shard: int = 0, purpose: int = 0):
        return derive_seed(self.seed, tag, shard, purpose)
