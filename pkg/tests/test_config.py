import math

import numpy as np
import pytest

from dfa_recommender.config import SEED_ENV, ExperimentConfig
from dfa_recommender.exceptions import DomainError


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.env"
    path.write_text("SEED=5\niterations=50\npB_prior=none\ntau_prior=4,2\nsplit=contiguous\n")
    return str(path)


def test_defaults():
    config = ExperimentConfig.resolve(environ={})

    # Assertions
    assert config.seed == 0
    assert config.iterations == 1000
    assert config.pB_prior == (1.0, 9.0)
    assert math.isinf(config.rho_sigma0)
    assert config.filter_rule().keep_fraction == 0.2


def test_file_values_are_typed(config_file):
    config = ExperimentConfig.resolve(config_file, environ={})

    # Assertions
    assert config.seed == 5
    assert config.iterations == 50
    assert config.pB_prior is None
    assert config.tau_prior == (4.0, 2.0)
    assert config.split == "contiguous"
    assert config.hyperparams().pB_prior is None


def test_priority_order(config_file):
    env = {SEED_ENV: "7"}
    assert ExperimentConfig.resolve(config_file, environ={}).seed == 5
    assert ExperimentConfig.resolve(config_file, environ=env).seed == 7
    assert ExperimentConfig.resolve(config_file, {"seed": 9}, env).seed == 9
    assert ExperimentConfig.resolve(config_file, {"iterations": 20, "out": "run"}, env).iterations == 20


def test_flag_can_clear_optional_value():
    config = ExperimentConfig.resolve(flags={"pB_prior": None}, environ={})
    assert config.pB_prior is None


def test_unknown_key(tmp_path):
    path = tmp_path / "bad.env"
    path.write_text("chains=4\n")
    with pytest.raises(DomainError, match="chains"):
        ExperimentConfig.resolve(str(path), environ={})


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentConfig.resolve(str(tmp_path / "absent.env"), environ={})


def test_invalid_values():
    with pytest.raises(DomainError):
        ExperimentConfig.parse_value("iterations", "many")
    with pytest.raises(DomainError):
        ExperimentConfig.parse_value("tau_prior", "none")
    with pytest.raises(DomainError):
        ExperimentConfig.resolve(environ={SEED_ENV: "x"})
    with pytest.raises(DomainError):
        ExperimentConfig.resolve(flags={"shards": 0}, environ={})
    with pytest.raises(DomainError):
        ExperimentConfig.resolve(flags={"lam": -1.0}, environ={})
    with pytest.raises(DomainError):
        ExperimentConfig.resolve(flags={"holdout": "most"}, environ={})


def test_epsilon_switches_filter_rule():
    config = ExperimentConfig.resolve(flags={"epsilon": 0.3}, environ={})
    rule = config.filter_rule()
    assert rule.epsilon == 0.3
    assert rule.keep_fraction is None


def test_derived_settings():
    config = ExperimentConfig.resolve(flags={"seed": 4, "iterations": 30, "thin": 3, "shards": 2}, environ={})
    chain = config.chain_config()
    cmc = config.cmc_config()

    # Assertions
    assert chain.n_stored() == 5
    assert cmc.S == 2
    assert cmc.master_seed == 4
    first = np.random.default_rng(config.seed_for("holdout")).random(3)
    again = np.random.default_rng(config.seed_for("holdout")).random(3)
    assert np.array_equal(first, again)


def test_to_dict_is_json_friendly():
    data = ExperimentConfig().to_dict()
    assert data["mf_k_grid"] == [2, 4, 8]
    assert data["tau_prior"] == [5.0, 1.0]
